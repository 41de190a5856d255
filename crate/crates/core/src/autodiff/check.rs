//! Finite-difference gradient checking.
//!
//! Analytic gradients come from the `f32` tape (the path training uses);
//! the reference is a central difference of the same function evaluated
//! forward-only in `f64`.

use super::graph::{Graph, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-4;

/// A scalar function of a fixed list of tensor inputs that can be built on
/// a graph of either precision.
pub trait Differentiable {
    fn name(&self) -> String;

    /// Input values, used for both precisions.
    fn inputs(&self) -> Vec<Tensor<f64>>;

    fn build<T: Scalar>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub worst_rel_err: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.worst_rel_err.is_finite() && self.worst_rel_err <= tol
    }
}

/// `|a − n| / max(1, |a|, |n|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Gradients of `f` with respect to each input from one backward pass.
pub fn analytic_gradients<F: Differentiable, T: Scalar>(f: &F) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::<T>::new();
    let vars: Vec<Var> = f.inputs().iter().map(|t| g.param(t.cast::<T>())).collect();
    let out = f.build(&mut g, &vars)?;
    g.backward(out)?;
    Ok(vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .unwrap_or(&[])
                .iter()
                .map(|x| x.as_f64())
                .collect()
        })
        .collect())
}

pub fn evaluate<F: Differentiable>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f.build(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Central differences `(f(x+h) − f(x−h)) / 2h` for every input element.
pub fn numeric_gradients<F: Differentiable>(f: &F, h: f64) -> Result<Vec<Vec<f64>>> {
    let mut inputs = f.inputs();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grads = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = orig + h;
            let plus = evaluate(f, &inputs)?;
            inputs[i].data_mut()[j] = orig - h;
            let minus = evaluate(f, &inputs)?;
            inputs[i].data_mut()[j] = orig;
            grads.push((plus - minus) / (2.0 * h));
        }
        out.push(grads);
    }
    Ok(out)
}

pub fn check_gradients<F: Differentiable>(f: &F, h: f64) -> Result<GradCheckReport> {
    let analytic = analytic_gradients::<F, f32>(f)?;
    let numeric = numeric_gradients(f, h)?;
    let mut worst = 0f64;
    let mut checked = 0;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&x, &y) in a.iter().zip(n) {
            let e = rel_err(x, y);
            worst = if e.is_nan() {
                f64::INFINITY
            } else {
                worst.max(e)
            };
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        name: f.name(),
        worst_rel_err: worst,
        checked,
    })
}
