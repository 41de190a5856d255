//! Swin-lite encoder and decoder, the pixel prediction head, and the shared
//! distillation head with an L2-normalized bottleneck.
//!
//! The token stream stays at a single resolution (no patch merging) so
//! encoder and decoder features of the visible patches line up one-to-one.
//! A batch of `B` images is processed as one `B·N × D′` matrix; attention
//! never crosses image boundaries because windows are built per image.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::seeding::{rng_for, stream};

#[derive(Clone, Debug, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub tensor: Tensor,
    /// Receives decoupled weight decay.
    pub decay: bool,
}

/// Ordered collection of every learnable array.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<NamedParam>,
}

impl ParamStore {
    fn push(&mut self, name: String, tensor: Tensor, decay: bool) -> usize {
        self.params.push(NamedParam {
            name,
            tensor,
            decay,
        });
        self.params.len() - 1
    }

    pub fn from_params(params: Vec<NamedParam>) -> Self {
        ParamStore { params }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, i: usize) -> &NamedParam {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut NamedParam {
        &mut self.params[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedParam> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut NamedParam> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// FNV-1a over every parameter's bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for p in &self.params {
            for v in p.tensor.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Shapes of the network, derived from a [`RunConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub token_dim: usize,
    pub grid: (usize, usize),
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    pub window: usize,
    pub shift_windows: bool,
    pub mlp_hidden: usize,
    pub head_hidden: usize,
    pub bottleneck: usize,
    pub head_dim: usize,
    pub ln_eps: f64,
    pub l2_eps: f64,
}

impl Architecture {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Architecture {
            token_dim: cfg.token_dim(),
            grid: cfg.grid(),
            embed_dim: cfg.embed_dim,
            encoder_depth: cfg.encoder_depth,
            decoder_depth: cfg.decoder_depth,
            heads: cfg.heads,
            window: cfg.window,
            shift_windows: cfg.shift_windows,
            mlp_hidden: cfg.embed_dim * cfg.mlp_ratio,
            head_hidden: cfg.head_hidden,
            bottleneck: cfg.bottleneck,
            head_dim: cfg.head_dim,
            ln_eps: cfg.ln_eps,
            l2_eps: cfg.l2_eps,
        })
    }

    pub fn n_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (d, e, h) = (self.token_dim, self.embed_dim, self.mlp_hidden);
        let block = 4 * e + 4 * (e * e + e) + (e * h + h) + (h * e + e);
        let head = (e * self.head_hidden + self.head_hidden)
            + (self.head_hidden * self.head_hidden + self.head_hidden)
            + (self.head_hidden * self.bottleneck + self.bottleneck)
            + self.bottleneck * self.head_dim;
        (d * e + e)
            + self.n_patches() * e
            + e
            + (self.encoder_depth + self.decoder_depth) * block
            + (e * d + d)
            + head
    }

    /// Row groups for window attention over `batch` stacked images. With
    /// `shifted`, windows are offset by half a window with cyclic wrap.
    pub fn window_groups(&self, batch: usize, shifted: bool) -> Vec<Vec<usize>> {
        let (rows, cols) = self.grid;
        let w = self.window;
        let s = if shifted { w / 2 } else { 0 };
        let n = rows * cols;
        let mut groups = Vec::with_capacity(batch * n / (w * w));
        for b in 0..batch {
            for wr in 0..rows / w {
                for wc in 0..cols / w {
                    let mut g = Vec::with_capacity(w * w);
                    for i in 0..w {
                        for j in 0..w {
                            let r = (wr * w + i + s) % rows;
                            let c = (wc * w + j + s) % cols;
                            g.push(b * n + r * cols + c);
                        }
                    }
                    groups.push(g);
                }
            }
        }
        groups
    }

    fn shifted(&self, block: usize) -> bool {
        self.shift_windows
            && block % 2 == 1
            && (self.window < self.grid.0 || self.window < self.grid.1)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct BlockLayout {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct HeadLayout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    proj: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    patch_w: usize,
    patch_b: usize,
    pos_embed: usize,
    mask_token: usize,
    encoder: Vec<BlockLayout>,
    decoder: Vec<BlockLayout>,
    pred_w: usize,
    pred_b: usize,
    head: HeadLayout,
}

/// Values bound onto one graph, indexed like the [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wrap vars recorded in store order (e.g. by a gradient checker).
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// The learnable state of the whole model plus its architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub store: ParamStore,
    layout: Layout,
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
    std: f32,
}

impl Builder<'_> {
    fn add(&mut self, name: String, shape: &[usize], init: Init, decay: bool) -> usize {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal => {
                let normal = Normal::new(0.0f32, self.std).expect("positive std");
                (0..n)
                    .map(|_| loop {
                        // truncated at two standard deviations
                        let v = normal.sample(self.rng);
                        if v.abs() <= 2.0 * self.std {
                            break v;
                        }
                    })
                    .collect()
            }
        };
        let t = Tensor::new(shape.to_vec(), data).expect("positive shape");
        self.store.push(name, t, decay)
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> (usize, usize) {
        let w = self.add(
            format!("{prefix}.weight"),
            &[fan_in, fan_out],
            Init::Normal,
            true,
        );
        let b = self.add(format!("{prefix}.bias"), &[fan_out], Init::Zeros, false);
        (w, b)
    }

    fn block(&mut self, prefix: &str, e: usize, hidden: usize) -> BlockLayout {
        let ln1_g = self.add(format!("{prefix}.norm1.gain"), &[e], Init::Ones, false);
        let ln1_b = self.add(format!("{prefix}.norm1.bias"), &[e], Init::Zeros, false);
        let (wq, bq) = self.linear(&format!("{prefix}.attn.q"), e, e);
        let (wk, bk) = self.linear(&format!("{prefix}.attn.k"), e, e);
        let (wv, bv) = self.linear(&format!("{prefix}.attn.v"), e, e);
        let (wo, bo) = self.linear(&format!("{prefix}.attn.out"), e, e);
        let ln2_g = self.add(format!("{prefix}.norm2.gain"), &[e], Init::Ones, false);
        let ln2_b = self.add(format!("{prefix}.norm2.bias"), &[e], Init::Zeros, false);
        let (fc1_w, fc1_b) = self.linear(&format!("{prefix}.mlp.fc1"), e, hidden);
        let (fc2_w, fc2_b) = self.linear(&format!("{prefix}.mlp.fc2"), hidden, e);
        BlockLayout {
            ln1_g,
            ln1_b,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln2_g,
            ln2_b,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
        }
    }
}

impl ModelParams {
    /// Fresh parameters: truncated normal (std `init_std`) for weights, mask
    /// token and positional embeddings; zero biases; unit norm gains. Uses
    /// the `seed` stream of the config.
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        let arch = Architecture::from_config(cfg)?;
        let mut rng = rng_for(&[cfg.seed, stream::INIT]);
        let mut p = Self::build(arch, &mut rng, cfg.init_std as f32);
        p.renormalize_head();
        Ok(p)
    }

    fn build(arch: Architecture, rng: &mut ChaCha8Rng, std: f32) -> Self {
        let (d, e) = (arch.token_dim, arch.embed_dim);
        let mut b = Builder {
            store: ParamStore::default(),
            rng,
            std,
        };
        let (patch_w, patch_b) = b.linear("patch_embed", d, e);
        let pos_embed = b.add(
            "pos_embed".into(),
            &[arch.n_patches(), e],
            Init::Normal,
            false,
        );
        let mask_token = b.add("mask_token".into(), &[e], Init::Normal, false);
        let encoder = (0..arch.encoder_depth)
            .map(|i| b.block(&format!("encoder.{i}"), e, arch.mlp_hidden))
            .collect();
        let decoder = (0..arch.decoder_depth)
            .map(|i| b.block(&format!("decoder.{i}"), e, arch.mlp_hidden))
            .collect();
        let (pred_w, pred_b) = b.linear("pred_head", e, d);
        let (w1, b1) = b.linear("distill_head.fc1", e, arch.head_hidden);
        let (w2, b2) = b.linear("distill_head.fc2", arch.head_hidden, arch.head_hidden);
        let (w3, b3) = b.linear("distill_head.fc3", arch.head_hidden, arch.bottleneck);
        let proj = b.add(
            "distill_head.proj.weight".into(),
            &[arch.bottleneck, arch.head_dim],
            Init::Normal,
            true,
        );
        ModelParams {
            arch,
            store: b.store,
            layout: Layout {
                patch_w,
                patch_b,
                pos_embed,
                mask_token,
                encoder,
                decoder,
                pred_w,
                pred_b,
                head: HeadLayout {
                    w1,
                    b1,
                    w2,
                    b2,
                    w3,
                    b3,
                    proj,
                },
            },
        }
    }

    /// Same names, shapes and order as [`ModelParams::init`], all zero.
    pub fn zeros(cfg: &RunConfig) -> Result<Self> {
        let arch = Architecture::from_config(cfg)?;
        let mut rng = rng_for(&[0]);
        let mut p = Self::build(arch, &mut rng, 1.0);
        for np in p.store.iter_mut() {
            np.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(p)
    }

    pub fn param_count(&self) -> usize {
        self.store.num_elements()
    }

    /// Index of the prediction-head weight and bias in the store.
    pub fn pred_head_params(&self) -> [usize; 2] {
        [self.layout.pred_w, self.layout.pred_b]
    }

    pub fn distill_head_params(&self) -> Vec<usize> {
        let h = &self.layout.head;
        vec![h.w1, h.b1, h.w2, h.b2, h.w3, h.b3, h.proj]
    }

    pub fn decoder_params(&self) -> Vec<usize> {
        self.layout.decoder.iter().flat_map(block_indices).collect()
    }

    pub fn encoder_params(&self) -> Vec<usize> {
        let l = &self.layout;
        let mut v = vec![l.patch_w, l.patch_b, l.pos_embed, l.mask_token];
        v.extend(l.encoder.iter().flat_map(block_indices));
        v
    }

    pub fn distill_projection(&self) -> &Tensor {
        &self.store.get(self.layout.head.proj).tensor
    }

    /// Rescale every column of the final distillation projection to unit
    /// L2 norm (weight normalization with a fixed unit gain).
    pub fn renormalize_head(&mut self) {
        let t = &mut self.store.get_mut(self.layout.head.proj).tensor;
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let data = t.data_mut();
        for c in 0..cols {
            let n = (0..rows)
                .map(|r| (data[r * cols + c] as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            if n > 0.0 {
                for r in 0..rows {
                    data[r * cols + c] = (data[r * cols + c] as f64 / n) as f32;
                }
            }
        }
    }

    /// Record every parameter on `g`, as trainable leaves or constants.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound(
            self.store
                .iter()
                .map(|p| {
                    let t = p.tensor.cast::<T>();
                    if trainable {
                        g.param(t)
                    } else {
                        g.constant(t)
                    }
                })
                .collect(),
        )
    }

    /// Project `B·N × D` tokens to `D′`, replace `masked_rows` with the
    /// mask token, then add positional embeddings to every row.
    pub fn embed<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        tokens: Var,
        masked_rows: &[usize],
        batch: usize,
    ) -> Result<Var> {
        let v = &p.0;
        let l = &self.layout;
        let n = self.arch.n_patches();
        let s = g.value(tokens).shape().to_vec();
        if s != [batch * n, self.arch.token_dim] {
            return Err(Error::shape(
                "embed",
                format!(
                    "tokens {s:?}, expected [{}, {}]",
                    batch * n,
                    self.arch.token_dim
                ),
            ));
        }
        let mut x = g.linear(tokens, v[l.patch_w], v[l.patch_b])?;
        if !masked_rows.is_empty() {
            x = g.substitute_rows(x, v[l.mask_token], masked_rows)?;
        }
        let tile: Vec<usize> = (0..batch).flat_map(|_| 0..n).collect();
        let pos = g.gather_rows(v[l.pos_embed], &tile)?;
        g.add(x, pos)
    }

    fn block<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        bl: &BlockLayout,
        x: Var,
        groups: Arc<Vec<Vec<usize>>>,
    ) -> Result<Var> {
        let v = &p.0;
        let eps = T::from_f64(self.arch.ln_eps);
        let h = g.layer_norm(x, v[bl.ln1_g], v[bl.ln1_b], eps)?;
        let q = g.linear(h, v[bl.wq], v[bl.bq])?;
        let k = g.linear(h, v[bl.wk], v[bl.bk])?;
        let vv = g.linear(h, v[bl.wv], v[bl.bv])?;
        let a = g.attention(q, k, vv, groups, self.arch.heads)?;
        let o = g.linear(a, v[bl.wo], v[bl.bo])?;
        let x = g.add(x, o)?;
        let h = g.layer_norm(x, v[bl.ln2_g], v[bl.ln2_b], eps)?;
        let h = g.linear(h, v[bl.fc1_w], v[bl.fc1_b])?;
        let h = g.gelu(h)?;
        let h = g.linear(h, v[bl.fc2_w], v[bl.fc2_b])?;
        g.add(x, h)
    }

    fn stack<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        blocks: &[BlockLayout],
        mut x: Var,
    ) -> Result<Var> {
        if blocks.is_empty() {
            return Ok(x);
        }
        let rows = g.value(x).shape()[0];
        let n = self.arch.n_patches();
        if rows % n != 0 || g.value(x).shape()[1] != self.arch.embed_dim {
            return Err(Error::shape(
                "transformer",
                format!(
                    "input {:?} is not a stack of {n}x{} token grids",
                    g.value(x).shape(),
                    self.arch.embed_dim
                ),
            ));
        }
        let batch = rows / n;
        let plain = Arc::new(self.arch.window_groups(batch, false));
        let shifted = Arc::new(self.arch.window_groups(batch, true));
        for (i, bl) in blocks.iter().enumerate() {
            let groups = if self.arch.shifted(i) {
                shifted.clone()
            } else {
                plain.clone()
            };
            x = self.block(g, p, bl, x, groups)?;
        }
        Ok(x)
    }

    /// Encoder blocks over the embedded stream; returns z_all.
    pub fn encoder_forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        self.stack(g, p, &self.layout.encoder, x)
    }

    /// Decoder blocks over z_all; returns y_all.
    pub fn decoder_forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Result<Var> {
        self.stack(g, p, &self.layout.decoder, z)
    }

    /// Linear map from decoder features back to normalized pixels.
    pub fn predict_pixels<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, y: Var) -> Result<Var> {
        g.linear(y, p.0[self.layout.pred_w], p.0[self.layout.pred_b])
    }

    /// Three-layer MLP, L2-normalized bottleneck, then the weight-normalized
    /// projection to K logits. Shared by the student and teacher streams.
    pub fn distill_logits<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let v = &p.0;
        let h = &self.layout.head;
        let a = g.linear(x, v[h.w1], v[h.b1])?;
        let a = g.gelu(a)?;
        let a = g.linear(a, v[h.w2], v[h.b2])?;
        let a = g.gelu(a)?;
        let a = g.linear(a, v[h.w3], v[h.b3])?;
        let a = g.l2_normalize(a, T::from_f64(self.arch.l2_eps))?;
        g.matmul(a, v[h.proj])
    }
}

fn block_indices(b: &BlockLayout) -> Vec<usize> {
    vec![
        b.ln1_g, b.ln1_b, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo, b.ln2_g, b.ln2_b,
        b.fc1_w, b.fc1_b, b.fc2_w, b.fc2_b,
    ]
}

/// Zero the attention-output and MLP-output projections of every block so
/// each block reduces to the identity through its residual paths.
pub fn zero_residual_branches(p: &mut ModelParams) {
    let idx: Vec<usize> = p
        .layout
        .encoder
        .iter()
        .chain(&p.layout.decoder)
        .flat_map(|b| [b.wo, b.bo, b.fc2_w, b.fc2_b])
        .collect();
    for i in idx {
        p.store
            .get_mut(i)
            .tensor
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
}

/// Overwrite all parameters with uniform noise in `[-scale, scale]`, e.g. to
/// make gradient checks sensitive to every path.
pub fn randomize(p: &mut ModelParams, rng: &mut ChaCha8Rng, scale: f32) {
    for np in p.store.iter_mut() {
        np.tensor
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-scale..scale));
    }
}
