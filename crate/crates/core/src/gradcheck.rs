//! Finite-difference suite over every tape primitive plus the end-to-end
//! training loss on a toy model.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::check::{check_gradients, Differentiable, GradCheckReport, DEFAULT_STEP};
use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::config::RunConfig;
use crate::error::Result;
use crate::imaging::GrayImage;
use crate::model::{randomize, Bound, ModelParams};
use crate::objective::{build_step, Objective};
use crate::patching::{random_mask, PatchBatch};

/// Tolerance for single primitives.
pub const PRIMITIVE_TOL: f64 = 1e-4;
/// Tolerance for the composed training loss.
pub const END_TO_END_TOL: f64 = 1e-3;

#[derive(Clone, Debug)]
enum Prim {
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    AddRowBias,
    Scale,
    Abs,
    Sum,
    Mean,
    Softmax,
    LogClamped,
    LayerNorm,
    Gelu,
    L2Normalize,
    GatherRows(Vec<usize>),
    SubstituteRows(Vec<usize>),
    Attention(Arc<Vec<Vec<usize>>>, usize),
    SharedInput,
}

/// One primitive applied to random inputs, reduced to a scalar by a fixed
/// random weighting so the whole Jacobian is exercised.
#[derive(Clone, Debug)]
pub struct PrimitiveCase {
    name: &'static str,
    prim: Prim,
    inputs: Vec<Tensor<f64>>,
    weights: Tensor<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor<f64> {
    let n = shape.iter().product();
    // Drawn in f32 so both precisions see exactly the same inputs.
    let data = (0..n).map(|_| rng.gen_range(lo..hi) as f64).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

impl PrimitiveCase {
    fn new(
        name: &'static str,
        prim: Prim,
        inputs: Vec<Tensor<f64>>,
        out_shape: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weights = uniform(rng, out_shape, -1.0, 1.0);
        PrimitiveCase {
            name,
            prim,
            inputs,
            weights,
        }
    }
}

impl Differentiable for PrimitiveCase {
    fn name(&self) -> String {
        self.name.to_string()
    }

    fn inputs(&self) -> Vec<Tensor<f64>> {
        self.inputs.clone()
    }

    fn build<T: Scalar>(&self, g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
        let y = match &self.prim {
            Prim::MatMul => g.matmul(x[0], x[1])?,
            Prim::Transpose => g.transpose(x[0])?,
            Prim::Add => g.add(x[0], x[1])?,
            Prim::Sub => g.sub(x[0], x[1])?,
            Prim::Mul => g.mul(x[0], x[1])?,
            Prim::AddRowBias => g.add_row_bias(x[0], x[1])?,
            Prim::Scale => g.scale(x[0], T::from_f64(-1.75))?,
            Prim::Abs => g.abs(x[0])?,
            Prim::Sum => g.sum(x[0])?,
            Prim::Mean => g.mean(x[0])?,
            Prim::Softmax => g.softmax(x[0])?,
            Prim::LogClamped => g.log_clamped(x[0], T::from_f64(1e-12))?,
            Prim::LayerNorm => g.layer_norm(x[0], x[1], x[2], T::from_f64(1e-5))?,
            Prim::Gelu => g.gelu(x[0])?,
            Prim::L2Normalize => g.l2_normalize(x[0], T::from_f64(1e-6))?,
            Prim::GatherRows(idx) => g.gather_rows(x[0], idx)?,
            Prim::SubstituteRows(rows) => g.substitute_rows(x[0], x[1], rows)?,
            Prim::Attention(groups, heads) => {
                g.attention(x[0], x[1], x[2], groups.clone(), *heads)?
            }
            Prim::SharedInput => {
                let a = g.mul(x[0], x[0])?;
                g.add(a, x[0])?
            }
        };
        let w = g.constant(self.weights.cast::<T>());
        let wy = g.mul(y, w)?;
        g.sum(wy)
    }
}

/// Random instances of every primitive, inputs drawn from [−2, 2].
pub fn primitive_cases(seed: u64) -> Vec<PrimitiveCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases = Vec::new();
    macro_rules! case {
        ($name:expr, $prim:expr, [$($shape:expr),*], $out:expr) => {{
            let inputs = vec![$(uniform(r, &$shape, -2.0, 2.0)),*];
            cases.push(PrimitiveCase::new($name, $prim, inputs, &$out, r));
        }};
    }
    case!("matmul", Prim::MatMul, [[3, 4], [4, 5]], [3, 5]);
    case!("transpose", Prim::Transpose, [[3, 4]], [4, 3]);
    case!("add", Prim::Add, [[3, 4], [3, 4]], [3, 4]);
    case!("sub", Prim::Sub, [[3, 4], [3, 4]], [3, 4]);
    case!("mul", Prim::Mul, [[3, 4], [3, 4]], [3, 4]);
    case!("add_row_bias", Prim::AddRowBias, [[3, 4], [4]], [3, 4]);
    case!("scale", Prim::Scale, [[3, 4]], [3, 4]);
    case!("abs", Prim::Abs, [[3, 4]], [3, 4]);
    case!("sum", Prim::Sum, [[3, 4]], [1]);
    case!("mean", Prim::Mean, [[3, 4]], [1]);
    case!("softmax", Prim::Softmax, [[3, 6]], [3, 6]);
    case!("layer_norm", Prim::LayerNorm, [[3, 6], [6], [6]], [3, 6]);
    case!("gelu", Prim::Gelu, [[3, 4]], [3, 4]);
    case!("l2_normalize", Prim::L2Normalize, [[3, 5]], [3, 5]);
    case!(
        "gather_rows",
        Prim::GatherRows(vec![2, 0, 2, 3]),
        [[4, 3]],
        [4, 3]
    );
    case!(
        "substitute_rows",
        Prim::SubstituteRows(vec![1, 3]),
        [[4, 3], [3]],
        [4, 3]
    );
    let groups = Arc::new(vec![vec![0, 2, 5], vec![1, 3, 4]]);
    case!(
        "attention",
        Prim::Attention(groups, 2),
        [[6, 4], [6, 4], [6, 4]],
        [6, 4]
    );
    case!("shared_input", Prim::SharedInput, [[3, 4]], [3, 4]);
    // log is only smooth away from the clamp
    let inputs = vec![uniform(r, &[3, 4], 0.25, 2.0)];
    cases.push(PrimitiveCase::new(
        "log_clamped",
        Prim::LogClamped,
        inputs,
        &[3, 4],
        r,
    ));
    cases
}

pub fn check_primitives(seed: u64) -> Result<Vec<GradCheckReport>> {
    primitive_cases(seed)
        .iter()
        .map(|c| check_gradients(c, DEFAULT_STEP))
        .collect()
}

/// Tiny configuration for the end-to-end check: 2×2 patch grid (N = 4),
/// D′ = 8, K = 16.
pub fn toy_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.apply_overrides(&[
        "image_height=8",
        "image_width=8",
        "patch_size=4",
        "embed_dim=8",
        "encoder_depth=2",
        "decoder_depth=1",
        "heads=2",
        "window=2",
        "mlp_ratio=2",
        "head_hidden=8",
        "bottleneck=8",
        "head_dim=16",
        "mask_ratio=0.5",
        "alpha=0.2",
        "epochs=2",
        "warmup_epochs=1",
    ])
    .expect("static overrides");
    c
}

/// Full training loss of a randomly parameterized toy model on a batch of
/// two random images, as a function of every model parameter.
pub struct EndToEndCase {
    model: ModelParams,
    batch: Vec<PatchBatch>,
    objective: Objective,
}

impl EndToEndCase {
    pub fn new(cfg: &RunConfig, seed: u64) -> Result<Self> {
        let mut model = ModelParams::init(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        randomize(&mut model, &mut rng, 0.5);
        let n = cfg.n_patches();
        let mut batch = Vec::new();
        for _ in 0..2 {
            let px = (0..cfg.image_height * cfg.image_width)
                .map(|_| rng.gen::<f32>())
                .collect();
            let img = GrayImage::new(cfg.image_height, cfg.image_width, px)?;
            let split = random_mask(n, cfg.mask_ratio, &mut rng)?;
            batch.push(PatchBatch::new(
                &img,
                cfg.patch_size,
                split,
                cfg.target_eps as f32,
            )?);
        }
        Ok(EndToEndCase {
            model,
            batch,
            objective: Objective::from_config(cfg)?,
        })
    }
}

impl Differentiable for EndToEndCase {
    fn name(&self) -> String {
        format!(
            "end_to_end[{}, distill={}]",
            self.objective.recon.name(),
            self.objective.distill
        )
    }

    fn inputs(&self) -> Vec<Tensor<f64>> {
        self.model.store.iter().map(|p| p.tensor.cast()).collect()
    }

    fn build<T: Scalar>(&self, g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
        let bound = Bound::from_vars(x.to_vec());
        Ok(build_step(g, &self.model, &bound, &self.batch, &self.objective)?.total)
    }
}

/// Gradient check of the composed loss. The teacher branch is left
/// differentiable here so finite differences see the same function.
pub fn check_end_to_end(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    for mode in ["masked-only", "whole-image"] {
        let mut cfg = toy_config();
        cfg.apply_overrides(&["stop_gradient=off", &format!("loss_mode={mode}")])?;
        out.push(check_gradients(
            &EndToEndCase::new(&cfg, seed)?,
            DEFAULT_STEP,
        )?);
    }
    Ok(out)
}
