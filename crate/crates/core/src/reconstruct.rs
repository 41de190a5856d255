//! Reconstruction dumps: original, masked input and the model's fill-in,
//! side by side.

use std::path::{Path, PathBuf};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::imaging::GrayImage;
use crate::model::ModelParams;
use crate::patching::{gather, patchify, random_mask, token_stats, unpatchify, MaskSplit};
use crate::seeding::{rng_for, stream};

#[derive(Clone, Debug, PartialEq)]
pub struct Triptych {
    pub original: GrayImage,
    /// Masked patches set to zero.
    pub masked: GrayImage,
    /// Visible patches copied from the original, masked patches predicted.
    pub reconstruction: GrayImage,
    pub masked_idx: Vec<usize>,
    pub patch: usize,
}

impl Triptych {
    pub fn combined(&self) -> Result<GrayImage> {
        GrayImage::hconcat(&[&self.original, &self.masked, &self.reconstruction])
    }

    /// Mean absolute difference to the original over masked pixels.
    pub fn masked_error(&self) -> f64 {
        let w = self.original.width();
        let cols = w / self.patch;
        let mut sum = 0.0;
        let mut count = 0usize;
        for &i in &self.masked_idx {
            let (r, c) = (i / cols, i % cols);
            for y in r * self.patch..(r + 1) * self.patch {
                for x in c * self.patch..(c + 1) * self.patch {
                    sum += (self.reconstruction.get(y, x) - self.original.get(y, x)).abs() as f64;
                    count += 1;
                }
            }
        }
        sum / count.max(1) as f64
    }

    /// Writes `<stem>.pgm` with the three panels next to each other and
    /// one file per panel. Returns the paths written.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut out = Vec::new();
        for (suffix, img) in [
            ("", self.combined()?),
            ("_original", self.original.clone()),
            ("_masked", self.masked.clone()),
            ("_reconstruction", self.reconstruction.clone()),
        ] {
            let path = dir.join(format!("{stem}{suffix}.pgm"));
            img.write_pgm(&path)?;
            out.push(path);
        }
        Ok(out)
    }
}

/// Reconstruct the masked patches of `image`. Predictions are normalized
/// pixels, so they are mapped back with each masked patch's own mean and
/// `max(std, eps)`.
pub fn reconstruct(
    model: &ModelParams,
    image: &GrayImage,
    split: &MaskSplit,
    target_eps: f32,
) -> Result<Triptych> {
    let patch = (model.arch.token_dim as f64).sqrt().round() as usize;
    let tokens = patchify(image, patch)?;
    let n = model.arch.n_patches();
    if tokens.rows() != n {
        return Err(Error::shape(
            "reconstruct",
            format!(
                "{}x{} image gives {} patches, model expects {n}",
                image.height(),
                image.width(),
                tokens.rows()
            ),
        ));
    }
    if split.masked.iter().chain(&split.visible).any(|&i| i >= n)
        || split.masked.len() + split.visible.len() != n
    {
        return Err(Error::Contract(format!(
            "mask split is not a partition of {n} patches"
        )));
    }

    let mut g: Graph<f32> = Graph::new();
    let p = model.bind(&mut g, false);
    let t = g.constant(tokens.clone());
    let x = model.embed(&mut g, &p, t, &split.masked, 1)?;
    let z = model.encoder_forward(&mut g, &p, x)?;
    let y = model.decoder_forward(&mut g, &p, z)?;
    let pred = model.predict_pixels(&mut g, &p, y)?;
    let pred = g.value(pred);

    let d = tokens.cols();
    let stats = token_stats(&gather(&tokens, &split.masked));
    let mut masked = tokens.data().to_vec();
    let mut recon = tokens.data().to_vec();
    for (&i, (mean, std)) in split.masked.iter().zip(stats) {
        let scale = std.max(target_eps);
        masked[i * d..(i + 1) * d].fill(0.0);
        for (r, &v) in recon[i * d..(i + 1) * d].iter_mut().zip(pred.row(i)) {
            *r = v * scale + mean;
        }
    }
    let grid = (image.height() / patch, image.width() / patch);
    let panel = |data: Vec<f32>| unpatchify(&Tensor::new(vec![n, d], data)?, grid, patch);
    Ok(Triptych {
        original: image.clone(),
        masked: panel(masked)?,
        reconstruction: panel(recon)?,
        masked_idx: split.masked.clone(),
        patch,
    })
}

/// [`reconstruct`] with a mask drawn from `(seed, image_index)`.
pub fn reconstruct_seeded(
    model: &ModelParams,
    image: &GrayImage,
    mask_ratio: f64,
    target_eps: f32,
    seed: u64,
    image_index: u64,
) -> Result<Triptych> {
    let split = random_mask(
        model.arch.n_patches(),
        mask_ratio,
        &mut rng_for(&[seed, stream::RECON, image_index]),
    )?;
    reconstruct(model, image, &split, target_eps)
}
