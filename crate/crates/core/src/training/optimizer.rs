use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::ParamStore;

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

impl AdamW {
    pub fn from_config(cfg: &RunConfig) -> Self {
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }
}

/// First and second moments per parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        grads
            .iter_mut()
            .flat_map(|g| g.iter_mut())
            .for_each(|x| *x *= s);
    }
    norm
}

/// One decoupled-weight-decay Adam update. `grads[i]` belongs to the i-th
/// parameter of `params`; decay only touches parameters flagged for it.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &[Option<Vec<f32>>],
    state: &mut OptimizerState,
    hp: &AdamW,
    lr: f64,
) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::Contract(format!(
            "learning rate must be non-negative, got {lr}"
        )));
    }
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        match g {
            None => {
                return Err(Error::Contract(format!(
                    "missing gradient for parameter `{}`",
                    p.name
                )))
            }
            Some(g) if g.len() != p.tensor.numel() || state.m[i].len() != g.len() => {
                return Err(Error::shape(
                    "adamw",
                    format!(
                        "parameter `{}` has {} elements, gradient {}",
                        p.name,
                        p.tensor.numel(),
                        g.len()
                    ),
                ))
            }
            Some(_) => {}
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (hp.beta1, hp.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].as_deref().expect("checked above");
        let decay = if p.decay { hp.weight_decay } else { 0.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
            let gj = g[j] as f64;
            let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
            let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let wj = *w as f64;
            let update = (mj / c1) / ((vj / c2).sqrt() + hp.eps);
            *w = (wj - lr * update - lr * decay * wj) as f32;
        }
    }
    Ok(())
}
