#![allow(dead_code)]

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdmim_core::autodiff::Graph;
use sdmim_core::gradcheck::toy_config;
use sdmim_core::imaging::GrayImage;
use sdmim_core::model::{randomize, ModelParams};
use sdmim_core::objective::{build_step, Objective, StepGraph};
use sdmim_core::patching::{random_mask, PatchBatch};
use sdmim_core::RunConfig;

pub fn config_file(name: &str) -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name);
    RunConfig::load(&path).expect("shipped config parses")
}

pub fn toy(overrides: &[&str]) -> RunConfig {
    let mut c = toy_config();
    c.apply_overrides(overrides).unwrap();
    c
}

/// One recorded and back-propagated training step of a randomized toy
/// model on two random images.
pub struct ToyStep {
    pub graph: Graph<f32>,
    pub step: StepGraph,
    pub batch: Vec<PatchBatch>,
    pub n_patches: usize,
}

impl ToyStep {
    pub fn run(cfg: &RunConfig, seed: u64) -> ToyStep {
        let mut model = ModelParams::init(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        randomize(&mut model, &mut rng, 0.5);
        let n = cfg.n_patches();
        let batch: Vec<PatchBatch> = (0..2)
            .map(|_| {
                let px = (0..cfg.image_height * cfg.image_width)
                    .map(|_| rng.gen::<f32>())
                    .collect();
                let img = GrayImage::new(cfg.image_height, cfg.image_width, px).unwrap();
                let split = random_mask(n, cfg.mask_ratio, &mut rng).unwrap();
                PatchBatch::new(&img, cfg.patch_size, split, cfg.target_eps as f32).unwrap()
            })
            .collect();
        let obj = Objective::from_config(cfg).unwrap();
        let mut graph: Graph<f32> = Graph::new();
        let p = model.bind(&mut graph, true);
        let step = build_step(&mut graph, &model, &p, &batch, &obj).unwrap();
        graph.backward(step.total).unwrap();
        ToyStep {
            graph,
            step,
            batch,
            n_patches: n,
        }
    }

    /// Stacked row indices of visible (false) or masked (true) patches.
    pub fn rows(&self, masked: bool) -> Vec<usize> {
        let n = self.n_patches;
        self.batch
            .iter()
            .enumerate()
            .flat_map(|(b, pb)| {
                let idx = if masked {
                    &pb.masked_idx
                } else {
                    &pb.visible_idx
                };
                idx.iter().map(move |&i| b * n + i)
            })
            .collect()
    }

    /// Gradient of the prediction head output, row by row.
    pub fn pred_grad_rows(&self, rows: &[usize]) -> Vec<Vec<f32>> {
        let d = self.graph.value(self.step.pred_all).cols();
        let grad = self.graph.grad(self.step.pred_all).map(<[f32]>::to_vec);
        rows.iter()
            .map(|&r| match &grad {
                Some(gr) => gr[r * d..(r + 1) * d].to_vec(),
                None => vec![0.0; d],
            })
            .collect()
    }

    /// Gradient reaching the teacher features through the distillation loss.
    pub fn teacher_grad(&self) -> Vec<f32> {
        let t = self.step.teacher_input.expect("distillation enabled");
        self.graph
            .grad(t)
            .map(<[f32]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.graph.value(t).numel()])
    }
}

pub fn all_zero(rows: &[Vec<f32>]) -> bool {
    rows.iter().flatten().all(|&v| v == 0.0)
}

pub fn any_nonzero(rows: &[Vec<f32>]) -> bool {
    rows.iter().flatten().any(|&v| v != 0.0)
}
