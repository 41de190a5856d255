use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::autodiff::Graph;
use crate::config::RunConfig;
use crate::data::{augment, LabeledImage};
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::model::ModelParams;
use crate::objective::{build_step, Objective};
use crate::patching::{random_mask, PatchBatch};
use crate::seeding::{rng_for, stream};
use crate::training::checkpoint::{epoch_path, Checkpoint};
use crate::training::{adamw_step, clip_grad_norm, AdamW, OptimizerState, Schedule};

pub const METRICS_HEADER: &str = "epoch,step,lr,l1,distill,total,mode,alpha,wall_ms";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_ECHO_FILE: &str = "config.txt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub report: LossReport,
    pub wall_ms: f64,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{:e},{},{},{},{},{},{:.3}",
            self.epoch, self.step, self.lr, r.l1, r.distill, r.total, r.mode, r.alpha, self.wall_ms
        )
    }
}

/// Per-epoch means over optimizer steps.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub l1: f64,
    pub distill: f64,
    pub total: f64,
}

/// Forward and backward pass for one batch. Returns the loss report and
/// the gradient of every parameter, in store order.
pub fn compute_gradients(
    batch: &[PatchBatch],
    model: &ModelParams,
    obj: &Objective,
) -> Result<(LossReport, Vec<Option<Vec<f32>>>)> {
    if batch.is_empty() {
        return Err(Error::Contract("train_step needs a nonempty batch".into()));
    }
    let mut g: Graph<f32> = Graph::new();
    let p = model.bind(&mut g, true);
    let step = build_step(&mut g, model, &p, batch, obj)?;
    if !step.report.is_finite() {
        return Err(non_finite(&g, &step.report));
    }
    g.backward(step.total)?;
    let grads: Vec<Option<Vec<f32>>> = p
        .vars()
        .iter()
        .map(|&v| g.grad(v).map(<[f32]>::to_vec))
        .collect();
    for (np, gr) in model.store.iter().zip(&grads) {
        if gr
            .as_ref()
            .is_some_and(|gr| gr.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::NonFinite(format!(
                "gradient of parameter `{}`",
                np.name
            )));
        }
    }
    Ok((step.report, grads))
}

fn non_finite(g: &Graph<f32>, report: &LossReport) -> Error {
    let first = match g.first_non_finite() {
        Some((v, op)) => format!("first non-finite tensor is node {} ({op})", v.id()),
        None => "no non-finite intermediate found".to_string(),
    };
    Error::NonFinite(format!(
        "loss l1={} distill={} total={}; {first}",
        report.l1, report.distill, report.total
    ))
}

/// One optimizer step: forward, losses, backward, optional clipping,
/// AdamW, then renormalization of the distillation projection.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    batch: &[PatchBatch],
    model: &mut ModelParams,
    opt: &mut OptimizerState,
    hp: &AdamW,
    obj: &Objective,
    lr: f64,
    grad_clip: f64,
) -> Result<LossReport> {
    let (report, mut grads) = compute_gradients(batch, model, obj)?;
    if grad_clip > 0.0 {
        let mut dense: Vec<Vec<f32>> = grads
            .iter_mut()
            .map(|g| g.take().unwrap_or_default())
            .collect();
        clip_grad_norm(&mut dense, grad_clip);
        grads = dense.into_iter().map(Some).collect();
    }
    adamw_step(&mut model.store, &grads, opt, hp, lr)?;
    model.renormalize_head();
    Ok(report)
}

/// Augment, patchify and mask image `idx` for `epoch`. Every random draw
/// comes from a stream keyed on (seed, epoch, idx), so the result does not
/// depend on batch composition or processing order.
pub fn prepare_sample(
    img: &LabeledImage,
    cfg: &RunConfig,
    epoch: usize,
    idx: usize,
) -> Result<PatchBatch> {
    let (e, i) = (epoch as u64, idx as u64);
    let img = if cfg.augment {
        augment(
            img,
            &mut rng_for(&[cfg.seed, stream::AUGMENT, e, i]),
            cfg.noise_sigma,
            true,
        )
    } else {
        img.clone()
    };
    let mut mask_rng = if cfg.remask_each_epoch {
        rng_for(&[cfg.seed, stream::MASK, e, i])
    } else {
        rng_for(&[cfg.seed, stream::MASK, i])
    };
    let split = random_mask(cfg.n_patches(), cfg.mask_ratio, &mut mask_rng)?;
    PatchBatch::new(&img.pixels, cfg.patch_size, split, cfg.target_eps as f32)
}

/// Pretraining loop state. Everything that influences later steps lives in
/// the checkpoint, so a resumed trainer continues bit-identically.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: RunConfig,
    pub model: ModelParams,
    pub opt: OptimizerState,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub history: Vec<EpochSummary>,
    pub records: Vec<StepRecord>,
    hp: AdamW,
    objective: Objective,
    schedule: Schedule,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let model = ModelParams::init(cfg)?;
        let opt = OptimizerState::new(&model.store);
        Self::assemble(cfg.clone(), model, opt, 0, 0)
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.check_compatible(&ckpt.config)?;
        Self::assemble(ckpt.config, ckpt.model, ckpt.opt, ckpt.epoch, ckpt.step)
    }

    fn assemble(
        config: RunConfig,
        model: ModelParams,
        opt: OptimizerState,
        epoch: usize,
        step: u64,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            hp: AdamW::from_config(&config),
            objective: Objective::from_config(&config)?,
            schedule: Schedule::from_config(&config),
            config,
            model,
            opt,
            epoch,
            step,
            history: Vec::new(),
            records: Vec::new(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            model: self.model.clone(),
            opt: self.opt.clone(),
            epoch: self.epoch,
            step: self.step,
        }
    }

    pub fn objective(&self) -> &Objective {
        &self.objective
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn batch_len(&self, n_images: usize) -> usize {
        match self.config.batch_size {
            0 => n_images,
            b => b.min(n_images),
        }
    }

    pub fn steps_per_epoch(&self, n_images: usize) -> usize {
        n_images.div_ceil(self.batch_len(n_images).max(1))
    }

    /// Train one epoch over `data` in a freshly shuffled order.
    pub fn run_epoch(&mut self, data: &[LabeledImage]) -> Result<EpochSummary> {
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let epoch = self.epoch;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng_for(&[
            self.config.seed,
            stream::SHUFFLE,
            epoch as u64,
        ]));
        let bs = self.batch_len(data.len());
        let steps = self.steps_per_epoch(data.len());
        let (mut l1, mut distill, mut total) = (0.0, 0.0, 0.0);
        for (s, chunk) in order.chunks(bs).enumerate() {
            let t0 = Instant::now();
            let batch = chunk
                .iter()
                .map(|&i| prepare_sample(&data[i], &self.config, epoch, i))
                .collect::<Result<Vec<_>>>()?;
            let lr = self.schedule.lr_at(epoch as f64 + s as f64 / steps as f64);
            let report = train_step(
                &batch,
                &mut self.model,
                &mut self.opt,
                &self.hp,
                &self.objective,
                lr,
                self.config.grad_clip,
            )?;
            self.step += 1;
            l1 += report.l1 as f64;
            distill += report.distill as f64;
            total += report.total as f64;
            self.records.push(StepRecord {
                epoch,
                step: self.step,
                lr,
                report,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            });
        }
        self.epoch += 1;
        let n = steps as f64;
        let summary = EpochSummary {
            epoch,
            steps,
            l1: l1 / n,
            distill: distill / n,
            total: total / n,
        };
        log::info!(
            "epoch {epoch}: l1 {:.4} distill {:.4} total {:.4}",
            summary.l1,
            summary.distill,
            summary.total
        );
        self.history.push(summary.clone());
        Ok(summary)
    }

    /// Train until `until` epochs are complete (capped at the configured
    /// total). With `out_dir`, appends metrics rows, writes periodic and
    /// final checkpoints and a config echo.
    pub fn fit_until(
        &mut self,
        data: &[LabeledImage],
        until: usize,
        out_dir: Option<&Path>,
    ) -> Result<()> {
        let until = until.min(self.config.epochs);
        let mut metrics = match out_dir {
            Some(dir) => Some(self.open_outputs(dir)?),
            None => None,
        };
        while self.epoch < until {
            let first_record = self.records.len();
            self.run_epoch(data)?;
            if let (Some(dir), Some(f)) = (out_dir, metrics.as_mut()) {
                let path = dir.join(METRICS_FILE);
                for r in &self.records[first_record..] {
                    writeln!(f, "{}", r.csv_row()).map_err(|e| Error::io(&path, e))?;
                }
                f.flush().map_err(|e| Error::io(&path, e))?;
                let k = self.config.checkpoint_every;
                if k > 0 && self.epoch % k == 0 {
                    self.checkpoint().save(&epoch_path(dir, self.epoch))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.checkpoint().save(&dir.join(FINAL_CHECKPOINT))?;
        }
        Ok(())
    }

    pub fn fit(&mut self, data: &[LabeledImage], out_dir: Option<&Path>) -> Result<()> {
        self.fit_until(data, self.config.epochs, out_dir)
    }

    fn open_outputs(&self, dir: &Path) -> Result<File> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let echo = dir.join(CONFIG_ECHO_FILE);
        std::fs::write(&echo, self.config.to_text()).map_err(|e| Error::io(&echo, e))?;
        let path = dir.join(METRICS_FILE);
        if self.epoch > 0 && path.exists() {
            OpenOptions::new()
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))
        } else {
            let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
            Ok(f)
        }
    }
}

/// Outcome of a complete pretraining run.
#[derive(Clone, Debug)]
pub struct FitResult {
    pub model: ModelParams,
    pub history: Vec<EpochSummary>,
    pub records: Vec<StepRecord>,
}

/// Pretrain from scratch on `dataset` for the configured number of epochs.
pub fn fit(dataset: &[LabeledImage], cfg: &RunConfig, out_dir: Option<&Path>) -> Result<FitResult> {
    let mut t = Trainer::new(cfg)?;
    t.fit(dataset, out_dir)?;
    Ok(FitResult {
        model: t.model,
        history: t.history,
        records: t.records,
    })
}
