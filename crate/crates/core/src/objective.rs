//! Pretraining objectives.
//!
//! Two named-strategy registries live here:
//!
//! * [`ReconstructionLoss`] decides which token predictions the L1 term
//!   scores: `masked-only` (the default) or `whole-image`.
//! * [`Variant`] is a named preset over the run config for the compared
//!   pretraining methods (`sd-simmim`, `simmim` and their whole-image
//!   counterparts).
//!
//! [`build_step`] composes embedding, encoder, decoder, both heads and the
//! losses on one graph for a batch of masked images.

use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::losses::{distill_loss, l1_masked, total_loss, LossReport};
use crate::model::{Bound, ModelParams};
use crate::patching::{normalize_targets, PatchBatch};

/// Which predictions enter the L1 term, and against what targets.
pub trait ReconstructionLoss: Send + Sync {
    fn name(&self) -> &'static str;

    fn description(&self) -> &'static str;

    /// Rows of the stacked `B·N` prediction matrix to score, with their
    /// normalized targets in the same order.
    fn select(&self, batch: &[PatchBatch], target_eps: f32) -> Result<(Vec<usize>, Tensor)>;
}

pub struct MaskedOnly;

impl ReconstructionLoss for MaskedOnly {
    fn name(&self) -> &'static str {
        "masked-only"
    }

    fn description(&self) -> &'static str {
        "L1 on masked tokens only"
    }

    fn select(&self, batch: &[PatchBatch], _target_eps: f32) -> Result<(Vec<usize>, Tensor)> {
        let mut rows = Vec::new();
        let mut data = Vec::new();
        for (b, pb) in batch.iter().enumerate() {
            let n = pb.n_patches();
            rows.extend(pb.masked_idx.iter().map(|&i| b * n + i));
            data.extend_from_slice(pb.targets.data());
        }
        let d = batch.first().map_or(0, |pb| pb.tokens.cols());
        Ok((rows.clone(), Tensor::new(vec![rows.len(), d], data)?))
    }
}

pub struct WholeImage;

impl ReconstructionLoss for WholeImage {
    fn name(&self) -> &'static str {
        "whole-image"
    }

    fn description(&self) -> &'static str {
        "L1 on every token, each normalized per patch"
    }

    fn select(&self, batch: &[PatchBatch], target_eps: f32) -> Result<(Vec<usize>, Tensor)> {
        let mut data = Vec::new();
        for pb in batch {
            data.extend_from_slice(normalize_targets(&pb.tokens, target_eps).data());
        }
        let rows: usize = batch.iter().map(PatchBatch::n_patches).sum();
        let d = batch.first().map_or(0, |pb| pb.tokens.cols());
        Ok(((0..rows).collect(), Tensor::new(vec![rows, d], data)?))
    }
}

pub static RECONSTRUCTION_LOSSES: &[&dyn ReconstructionLoss] = &[&MaskedOnly, &WholeImage];

pub fn reconstruction_loss(name: &str) -> Result<&'static dyn ReconstructionLoss> {
    RECONSTRUCTION_LOSSES
        .iter()
        .copied()
        .find(|r| r.name() == name)
        .ok_or_else(|| {
            let known: Vec<_> = RECONSTRUCTION_LOSSES.iter().map(|r| r.name()).collect();
            Error::config(
                "loss_mode",
                format!("unknown strategy {name:?}; known: {}", known.join(", ")),
            )
        })
}

/// A named pretraining method, expressed as config edits.
pub trait Variant: Send + Sync {
    fn name(&self) -> &'static str;

    fn description(&self) -> &'static str;

    fn configure(&self, cfg: &mut RunConfig);
}

struct Preset {
    name: &'static str,
    description: &'static str,
    distill: bool,
    loss_mode: &'static str,
}

impl Variant for Preset {
    fn name(&self) -> &'static str {
        self.name
    }

    fn description(&self) -> &'static str {
        self.description
    }

    fn configure(&self, cfg: &mut RunConfig) {
        cfg.distill = self.distill;
        cfg.loss_mode = self.loss_mode.to_string();
        if !self.distill {
            cfg.alpha = 1.0;
        }
    }
}

pub static VARIANTS: &[&dyn Variant] = &[
    &Preset {
        name: "sd-simmim",
        description: "masked L1 plus decoder-to-encoder self-distillation",
        distill: true,
        loss_mode: "masked-only",
    },
    &Preset {
        name: "sd-simmim-whole",
        description: "self-distillation with L1 over the whole image",
        distill: true,
        loss_mode: "whole-image",
    },
    &Preset {
        name: "simmim",
        description: "masked L1 only",
        distill: false,
        loss_mode: "masked-only",
    },
    &Preset {
        name: "simmim-whole",
        description: "L1 over the whole image, no distillation",
        distill: false,
        loss_mode: "whole-image",
    },
];

pub fn variant(name: &str) -> Result<&'static dyn Variant> {
    VARIANTS
        .iter()
        .copied()
        .find(|v| v.name() == name)
        .ok_or_else(|| {
            let known: Vec<_> = VARIANTS.iter().map(|v| v.name()).collect();
            Error::config(
                "variant",
                format!("unknown variant {name:?}; known: {}", known.join(", ")),
            )
        })
}

/// Loss-related settings resolved from a [`RunConfig`].
#[derive(Clone, Copy)]
pub struct Objective {
    pub alpha: f64,
    pub distill: bool,
    pub stop_gradient: bool,
    pub target_eps: f32,
    pub recon: &'static dyn ReconstructionLoss,
}

impl std::fmt::Debug for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Objective")
            .field("alpha", &self.alpha)
            .field("distill", &self.distill)
            .field("stop_gradient", &self.stop_gradient)
            .field("recon", &self.recon.name())
            .finish()
    }
}

impl Objective {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        if !(0.0..=1.0).contains(&cfg.alpha) {
            return Err(Error::config("alpha", "must lie in [0, 1]"));
        }
        Ok(Objective {
            alpha: cfg.alpha,
            distill: cfg.distill,
            stop_gradient: cfg.stop_gradient,
            target_eps: cfg.target_eps as f32,
            recon: reconstruction_loss(&cfg.loss_mode)?,
        })
    }

    /// Weight on the L1 term; without distillation the loss is pure L1.
    pub fn effective_alpha(&self) -> f64 {
        if self.distill {
            self.alpha
        } else {
            1.0
        }
    }
}

/// Handles into a recorded training step.
#[derive(Clone, Debug)]
pub struct StepGraph {
    pub total: Var,
    pub l1: Var,
    pub distill: Option<Var>,
    pub z_all: Var,
    pub y_all: Var,
    /// Prediction head applied to every token, `B·N × D`.
    pub pred_all: Var,
    /// Gathered decoder features of visible tokens (the teacher input).
    pub teacher_input: Option<Var>,
    /// Gathered encoder features of visible tokens (the student input).
    pub student_input: Option<Var>,
    pub report: LossReport,
}

/// Stack per-image tokens into one `B·N × D` matrix.
pub fn stack_tokens(batch: &[PatchBatch]) -> Result<Tensor> {
    let first = batch
        .first()
        .ok_or_else(|| Error::Contract("empty batch".into()))?;
    let (n, d) = (first.n_patches(), first.tokens.cols());
    let mut data = Vec::with_capacity(batch.len() * n * d);
    for pb in batch {
        if pb.tokens.shape() != [n, d] {
            return Err(Error::shape(
                "batch",
                format!("token shapes differ: {:?} vs [{n}, {d}]", pb.tokens.shape()),
            ));
        }
        data.extend_from_slice(pb.tokens.data());
    }
    Tensor::new(vec![batch.len() * n, d], data)
}

/// Record the full pretraining loss of `batch` on `g`.
pub fn build_step<T: Scalar>(
    g: &mut Graph<T>,
    model: &ModelParams,
    p: &Bound,
    batch: &[PatchBatch],
    obj: &Objective,
) -> Result<StepGraph> {
    let tokens = g.constant(stack_tokens(batch)?.cast::<T>());
    let n = model.arch.n_patches();
    let mut masked_rows = Vec::new();
    let mut visible_rows = Vec::new();
    for (b, pb) in batch.iter().enumerate() {
        masked_rows.extend(pb.masked_idx.iter().map(|&i| b * n + i));
        visible_rows.extend(pb.visible_idx.iter().map(|&i| b * n + i));
    }

    let x = model.embed(g, p, tokens, &masked_rows, batch.len())?;
    let z_all = model.encoder_forward(g, p, x)?;
    let y_all = model.decoder_forward(g, p, z_all)?;
    let pred_all = model.predict_pixels(g, p, y_all)?;

    let (rows, targets) = obj.recon.select(batch, obj.target_eps)?;
    let pred = g.gather_rows(pred_all, &rows)?;
    let target = g.constant(targets.cast::<T>());
    // Both strategies use the same mean absolute error; they differ only in
    // the rows selected above.
    let l1 = l1_masked(g, pred, target)?;

    let (total, distill, teacher_input, student_input) = if obj.distill {
        let z_vis = g.gather_rows(z_all, &visible_rows)?;
        let y_vis = g.gather_rows(y_all, &visible_rows)?;
        let teacher = if obj.stop_gradient {
            g.detach(y_vis)
        } else {
            y_vis
        };
        let q = model.distill_logits(g, p, z_vis)?;
        let pt = model.distill_logits(g, p, teacher)?;
        let pt = if obj.stop_gradient { g.detach(pt) } else { pt };
        let d = distill_loss(g, q, pt)?;
        let total = total_loss(g, l1, d, obj.alpha)?;
        (total, Some(d), Some(y_vis), Some(z_vis))
    } else {
        (l1, None, None, None)
    };

    let report = LossReport {
        l1: g.value(l1).item().as_f64() as f32,
        distill: distill.map_or(0.0, |d| g.value(d).item().as_f64() as f32),
        total: g.value(total).item().as_f64() as f32,
        alpha: obj.effective_alpha() as f32,
        n_masked: masked_rows.len(),
        n_visible: visible_rows.len(),
        mode: obj.recon.name(),
    };
    Ok(StepGraph {
        total,
        l1,
        distill,
        z_all,
        y_all,
        pred_all,
        teacher_input,
        student_input,
        report,
    })
}
