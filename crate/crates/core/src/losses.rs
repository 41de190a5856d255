//! Reconstruction L1, self-distillation cross-entropy and their weighted sum.

use crate::autodiff::{Graph, Scalar, Var};
use crate::error::{Error, Result};

/// Probabilities are clamped here before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

/// Loss values of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub l1: f32,
    pub distill: f32,
    pub total: f32,
    pub alpha: f32,
    pub n_masked: usize,
    pub n_visible: usize,
    /// Name of the reconstruction strategy (`masked-only` / `whole-image`).
    pub mode: &'static str,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.l1.is_finite() && self.distill.is_finite() && self.total.is_finite()
    }
}

fn check_same(g: &Graph<impl Scalar>, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (g.value(a).shape(), g.value(b).shape());
    if sa != sb {
        return Err(Error::shape(
            op,
            format!("prediction {sa:?} vs target {sb:?}"),
        ));
    }
    Ok(())
}

/// Mean absolute error over every element of the masked-token predictions.
pub fn l1_masked<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    check_same(g, "l1_masked", pred, target)?;
    let d = g.sub(pred, target)?;
    let a = g.abs(d)?;
    g.mean(a)
}

/// Same reduction as [`l1_masked`], over the predictions of all tokens.
pub fn l1_whole_image<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    check_same(g, "l1_whole_image", pred, target)?;
    let d = g.sub(pred, target)?;
    let a = g.abs(d)?;
    g.mean(a)
}

/// Row-mean of `−Σ_k softmax(p)_k · ln softmax(q)_k`. The teacher logits
/// `p` are used as given; detach them first for a stop-gradient.
pub fn distill_loss<T: Scalar>(g: &mut Graph<T>, q: Var, p: Var) -> Result<Var> {
    let (sq, sp) = (g.value(q).shape(), g.value(p).shape());
    if sq != sp {
        return Err(Error::shape(
            "distill_loss",
            format!("student {sq:?} vs teacher {sp:?}"),
        ));
    }
    let rows = g.value(q).rows();
    let qs = g.softmax(q)?;
    let ps = g.softmax(p)?;
    let lq = g.log_clamped(qs, T::from_f64(LOG_FLOOR))?;
    let prod = g.mul(ps, lq)?;
    let s = g.sum(prod)?;
    g.scale(s, T::from_f64(-1.0 / rows as f64))
}

/// `alpha·l1 + (1 − alpha)·distill`.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, l1: Var, distill: Var, alpha: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config("alpha", format!("{alpha} outside [0, 1]")));
    }
    let a = g.scale(l1, T::from_f64(alpha))?;
    let b = g.scale(distill, T::from_f64(1.0 - alpha))?;
    g.add(a, b)
}
