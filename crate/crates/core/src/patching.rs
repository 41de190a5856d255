//! Patch tokens, the random visible/masked split, and normalized targets.

use rand::seq::index;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::imaging::GrayImage;

/// Split an image into `P×P` patches in row-major grid order; each token is
/// its patch flattened row-major, so D = P².
pub fn patchify(image: &GrayImage, patch: usize) -> Result<Tensor> {
    let (h, w) = (image.height(), image.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(
            "patchify",
            format!("{h}x{w} image is not divisible into {patch}x{patch} patches"),
        ));
    }
    let (rows, cols) = (h / patch, w / patch);
    let d = patch * patch;
    let mut data = Vec::with_capacity(rows * cols * d);
    for pr in 0..rows {
        for pc in 0..cols {
            for y in 0..patch {
                let start = (pr * patch + y) * w + pc * patch;
                data.extend_from_slice(&image.pixels()[start..start + patch]);
            }
        }
    }
    Tensor::new(vec![rows * cols, d], data)
}

/// Inverse of [`patchify`], clamping to [0, 1].
pub fn unpatchify(tokens: &Tensor, grid: (usize, usize), patch: usize) -> Result<GrayImage> {
    let (rows, cols) = grid;
    if tokens.shape() != [rows * cols, patch * patch] {
        return Err(Error::shape(
            "unpatchify",
            format!(
                "tokens {:?} vs grid {rows}x{cols} of {patch}x{patch} patches",
                tokens.shape()
            ),
        ));
    }
    let w = cols * patch;
    let mut px = vec![0.0f32; rows * patch * w];
    for pr in 0..rows {
        for pc in 0..cols {
            let tok = tokens.row(pr * cols + pc);
            for y in 0..patch {
                let start = (pr * patch + y) * w + pc * patch;
                for (d, s) in px[start..start + patch]
                    .iter_mut()
                    .zip(&tok[y * patch..(y + 1) * patch])
                {
                    *d = s.clamp(0.0, 1.0);
                }
            }
        }
    }
    GrayImage::new(rows * patch, w, px)
}

/// `round(N·M)` clamped to `[1, N−1]`.
pub fn masked_count(n_patches: usize, mask_ratio: f64) -> usize {
    let k = (n_patches as f64 * mask_ratio).round() as usize;
    k.clamp(1, n_patches.saturating_sub(1).max(1))
}

/// Sorted `(visible, masked)` index lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSplit {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

/// Mask a uniformly random subset of `masked_count(N, M)` patches.
pub fn random_mask(n_patches: usize, mask_ratio: f64, rng: &mut ChaCha8Rng) -> Result<MaskSplit> {
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
        return Err(Error::config(
            "mask_ratio",
            format!("{mask_ratio} outside (0, 1)"),
        ));
    }
    if n_patches < 2 {
        return Err(Error::Contract(format!(
            "masking needs at least 2 patches, got {n_patches}"
        )));
    }
    let k = masked_count(n_patches, mask_ratio);
    let mut is_masked = vec![false; n_patches];
    for i in index::sample(rng, n_patches, k) {
        is_masked[i] = true;
    }
    let (masked, visible): (Vec<usize>, Vec<usize>) = (0..n_patches).partition(|&i| is_masked[i]);
    Ok(MaskSplit { visible, masked })
}

/// Per-row mean and population standard deviation.
pub fn token_stats(tokens: &Tensor) -> Vec<(f32, f32)> {
    let d = tokens.cols();
    tokens
        .data()
        .chunks(d)
        .map(|row| {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            (mean as f32, var.sqrt() as f32)
        })
        .collect()
}

/// Each row shifted to zero mean and divided by `max(std, eps)`.
pub fn normalize_targets(tokens: &Tensor, eps: f32) -> Tensor {
    let d = tokens.cols();
    let mut out = tokens.data().to_vec();
    for (row, (mean, std)) in out.chunks_mut(d).zip(token_stats(tokens)) {
        let denom = std.max(eps);
        row.iter_mut().for_each(|v| *v = (*v - mean) / denom);
    }
    Tensor::new(tokens.shape().to_vec(), out).expect("same shape")
}

/// Rows of a recorded token matrix, differentiable.
pub fn gather_tokens<T: Scalar>(g: &mut Graph<T>, tokens: Var, idx: &[usize]) -> Result<Var> {
    g.gather_rows(tokens, idx)
}

/// One image ready for a training step.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch {
    /// All patch tokens, `N×D`.
    pub tokens: Tensor,
    pub visible_idx: Vec<usize>,
    pub masked_idx: Vec<usize>,
    /// Normalized masked tokens, row `i` ↔ `masked_idx[i]`.
    pub targets: Tensor,
    pub grid: (usize, usize),
}

impl PatchBatch {
    pub fn new(image: &GrayImage, patch: usize, split: MaskSplit, target_eps: f32) -> Result<Self> {
        let tokens = patchify(image, patch)?;
        let n = tokens.rows();
        let mut seen = vec![false; n];
        for &i in split.visible.iter().chain(&split.masked) {
            if i >= n || seen[i] {
                return Err(Error::Contract(format!(
                    "mask split is not a partition of {n} patches"
                )));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) || split.masked.is_empty() || split.visible.is_empty() {
            return Err(Error::Contract(
                "mask split must cover all patches with both sets non-empty".into(),
            ));
        }
        let masked_tokens = gather(&tokens, &split.masked);
        Ok(PatchBatch {
            targets: normalize_targets(&masked_tokens, target_eps),
            tokens,
            visible_idx: split.visible,
            masked_idx: split.masked,
            grid: (image.height() / patch, image.width() / patch),
        })
    }

    pub fn n_patches(&self) -> usize {
        self.tokens.rows()
    }
}

/// Row selection outside of a graph.
pub fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.cols();
    let data = idx
        .iter()
        .flat_map(|&i| t.row(i).iter().copied())
        .collect::<Vec<_>>();
    Tensor::new(vec![idx.len(), c], data).expect("non-empty selection")
}
