//! Training corpora: a synthetic panoramic-radiograph-like generator with
//! per-patch labels, image-folder loading, and augmentation.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imaging::GrayImage;
use crate::seeding::{rng_for, stream};

pub const BACKGROUND: u8 = 0;
pub const TOOTH: u8 = 1;
pub const RESTORATION: u8 = 2;
pub const APPLIANCE: u8 = 3;
pub const N_CLASSES: usize = 4;

/// Per-patch class grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelGrid {
    rows: usize,
    cols: usize,
    classes: Vec<u8>,
}

impl LabelGrid {
    pub fn new(rows: usize, cols: usize, classes: Vec<u8>) -> Result<Self> {
        if classes.len() != rows * cols {
            return Err(Error::shape(
                "labels",
                format!("{rows}x{cols} grid with {} entries", classes.len()),
            ));
        }
        if let Some(c) = classes.iter().find(|&&c| c as usize >= N_CLASSES) {
            return Err(Error::Data(format!("label {c} outside 0..{N_CLASSES}")));
        }
        Ok(LabelGrid {
            rows,
            cols,
            classes,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn flip_horizontal(&self) -> LabelGrid {
        let mut classes = self.classes.clone();
        for row in classes.chunks_mut(self.cols) {
            row.reverse();
        }
        LabelGrid { classes, ..*self }
    }

    /// One CSV line per patch row.
    pub fn to_csv(&self) -> String {
        self.classes
            .chunks(self.cols)
            .map(|r| r.iter().map(u8::to_string).collect::<Vec<_>>().join(",") + "\n")
            .collect()
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = 0;
        let mut cols = None;
        let mut classes = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let row: Vec<u8> = line
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<u8>()
                        .map_err(|e| Error::Data(format!("label csv: {e}")))
                })
                .collect::<Result<_>>()?;
            if *cols.get_or_insert(row.len()) != row.len() {
                return Err(Error::Data("label csv: ragged rows".into()));
            }
            classes.extend(row);
            rows += 1;
        }
        LabelGrid::new(rows, cols.unwrap_or(0), classes)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub pixels: GrayImage,
    pub labels: Option<LabelGrid>,
    pub seed: u64,
}

impl LabeledImage {
    pub fn flip_horizontal(&self) -> LabeledImage {
        LabeledImage {
            pixels: self.pixels.flip_horizontal(),
            labels: self.labels.as_ref().map(LabelGrid::flip_horizontal),
            seed: self.seed,
        }
    }
}

struct Canvas {
    h: usize,
    w: usize,
    px: Vec<f32>,
    cls: Vec<u8>,
}

impl Canvas {
    fn paint(&mut self, y: usize, x: usize, v: f32, class: u8) {
        let i = y * self.w + x;
        self.px[i] = v;
        self.cls[i] = class;
    }
}

fn synth_one(seed: u64, h: usize, w: usize, patch: usize) -> LabeledImage {
    synth_with(seed, h, w, patch, SENSOR_NOISE)
}

const SENSOR_NOISE: f32 = 0.01;

fn synth_with(seed: u64, h: usize, w: usize, patch: usize, sensor_noise: f32) -> LabeledImage {
    let mut rng = rng_for(&[seed, stream::SYNTH]);
    let (hf, wf) = (h as f32, w as f32);
    let mut c = Canvas {
        h,
        w,
        px: vec![0.0; h * w],
        cls: vec![BACKGROUND; h * w],
    };

    // Patient positioning is standardized, so anatomy only jitters a little.
    // Centered on the mirror axis so flipped images look alike.
    let cx = (wf - 1.0) / 2.0 + wf * rng.gen_range(-0.005..0.005f32);
    let cy = (hf - 1.0) / 2.0 + hf * rng.gen_range(-0.005..0.005f32);

    // Jaw silhouette with a soft edge, plus the cortical lines of the
    // mandible border and the sinus floor.
    let base = rng.gen_range(0.08..0.12f32);
    let bone = rng.gen_range(0.20..0.26f32);
    let (ax, ay) = (0.40 * wf, 0.36 * hf);
    let mandible = rng.gen_range(0.31..0.35f32) * hf;
    let sinus = rng.gen_range(0.31..0.35f32) * hf;
    let cortex = (0.025 * hf).max(1.0);
    let texture = rng.gen_range(0.15..0.17f32);
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f32, y as f32);
            let r = (((xf - cx) / ax).powi(2) + ((yf - cy) / ay).powi(2)).sqrt();
            let mut v = base + bone / (1.0 + ((r - 1.0) / 0.08).exp());
            let u = (xf - cx) / ax;
            let lower = cy + mandible - 0.10 * hf * u * u;
            let upper = cy - sinus + 0.06 * hf * u * u;
            v += 0.25 * (-((yf - lower) / cortex).powi(2)).exp();
            v += 0.15 * (-((yf - upper) / cortex).powi(2)).exp();
            // trabecular texture, anchored to the jaw
            let period = 0.1 * wf;
            let tex = (std::f32::consts::TAU * (xf - cx) / period).cos()
                * (std::f32::consts::TAU * (yf - cy) / period).sin();
            v += texture * tex;
            c.px[y * w + x] = v;
        }
    }

    // Two arcs of elliptical teeth; the upper arc bends up at the ends and
    // the lower one bends down. Each tooth has a darker pulp canal and a
    // brighter enamel cap on the occlusal side.
    let n_teeth = 8;
    let gap = 0.03 * hf;
    let curve = 0.08 * hf;
    let appliance_rows: Vec<bool> = (0..2).map(|_| rng.gen_bool(0.3)).collect();
    for (arc, &sign) in [-1.0f32, 1.0].iter().enumerate() {
        let span = wf * 0.8;
        let x0 = cx - span / 2.0;
        let step = span / n_teeth as f32;
        let mut crowns = Vec::new();
        for t in 0..n_teeth {
            if rng.gen_bool(0.05) {
                continue;
            }
            let tx = x0 + step * (t as f32 + 0.5);
            let u = (tx - cx) / (span / 2.0);
            let rx = step * 0.42;
            let ry = hf * 0.13;
            // crown edge sits next to the occlusal gap
            let ty = cy + sign * (gap + ry) - sign * curve * u * u;
            let tooth_v = rng.gen_range(0.58..0.66f32);
            let x_lo = (tx - rx).floor().max(0.0) as usize;
            let x_hi = ((tx + rx).ceil() as usize).min(w - 1);
            let y_lo = (ty - ry).floor().max(0.0) as usize;
            let y_hi = ((ty + ry).ceil() as usize).min(h - 1);
            for y in y_lo..=y_hi {
                for x in x_lo..=x_hi {
                    let ex = (x as f32 - tx) / rx;
                    let ey = (y as f32 - ty) / ry;
                    let r2 = ex * ex + ey * ey;
                    if r2 <= 1.0 {
                        let mut v = tooth_v * (1.0 - 0.2 * r2);
                        // ey < 0 points toward the gap for the lower arc
                        let occlusal = -sign * ey;
                        if occlusal > 0.45 {
                            v += 0.14;
                        } else if ex.abs() < 0.22 {
                            v *= 0.6;
                        }
                        c.paint(y, x, v, TOOTH);
                    }
                }
            }
            let crown_y = ty - sign * ry * 0.55;
            crowns.push(crown_y);
            if rng.gen_bool(0.25) {
                // restoration over the crown half of the tooth
                let rw = rx * rng.gen_range(0.6..0.9f32);
                let rh = ry * rng.gen_range(0.35..0.55f32);
                let rv = rng.gen_range(0.88..0.98f32);
                let ry0 = (crown_y - rh).max(0.0) as usize;
                let ry1 = ((crown_y + rh) as usize).min(h - 1);
                let rx0 = (tx - rw).max(0.0) as usize;
                let rx1 = ((tx + rw) as usize).min(w - 1);
                for y in ry0..=ry1 {
                    for x in rx0..=rx1 {
                        c.paint(y, x, rv, RESTORATION);
                    }
                }
            }
        }
        if appliance_rows[arc] && !crowns.is_empty() {
            // orthodontic wire: thin bright strip along the crowns
            let yc = crowns.iter().sum::<f32>() / crowns.len() as f32;
            let thick = rng.gen_range(3..=5usize);
            let y0 = (yc as usize).saturating_sub(thick / 2);
            for y in y0..(y0 + thick).min(h) {
                for x in (x0.max(0.0) as usize)..((x0 + span) as usize).min(w) {
                    c.paint(y, x, 0.97, APPLIANCE);
                }
            }
        }
    }

    // Per-image exposure, then sensor noise.
    let gain = rng.gen_range(0.9..1.1f32);
    let offset = rng.gen_range(-0.03..0.03f32);
    let noise = Normal::new(0.0f32, sensor_noise.max(1e-9)).expect("valid sigma");
    for p in c.px.iter_mut() {
        let n = noise.sample(&mut rng);
        *p = (offset + gain * *p + if sensor_noise > 0.0 { n } else { 0.0 }).clamp(0.0, 1.0);
    }

    let labels = dominant_labels(&c, patch);
    LabeledImage {
        pixels: GrayImage::new(h, w, c.px).expect("canvas size"),
        labels: Some(labels),
        seed,
    }
}

/// Most frequent pixel class per patch (ties go to the higher class id).
fn dominant_labels(c: &Canvas, patch: usize) -> LabelGrid {
    let (rows, cols) = (c.h / patch, c.w / patch);
    let mut classes = Vec::with_capacity(rows * cols);
    for pr in 0..rows {
        for pc in 0..cols {
            let mut counts = [0usize; N_CLASSES];
            for y in pr * patch..(pr + 1) * patch {
                for x in pc * patch..(pc + 1) * patch {
                    counts[c.cls[y * c.w + x] as usize] += 1;
                }
            }
            let best = (0..N_CLASSES).rev().max_by_key(|&k| counts[k]).unwrap_or(0);
            classes.push(best as u8);
        }
    }
    LabelGrid {
        rows,
        cols,
        classes,
    }
}

/// Deterministic synthetic corpus; image `i` depends only on `(seed, i)`.
pub fn generate_synthetic(
    seed: u64,
    height: usize,
    width: usize,
    patch: usize,
    n_images: usize,
) -> Result<Vec<LabeledImage>> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::shape(
            "generate_synthetic",
            format!("{height}x{width} not divisible by patch size {patch}"),
        ));
    }
    Ok((0..n_images as u64)
        .map(|i| {
            synth_one(
                crate::seeding::derive_seed(&[seed, i]),
                height,
                width,
                patch,
            )
        })
        .collect())
}

/// Load every decodable PGM/PNG in `dir` (sorted by name), resized to
/// `height`×`width`. Undecodable files are skipped with a warning. A
/// `<stem>.labels.csv` sidecar, when present, is read as the label grid.
pub fn load_folder(dir: &Path, height: usize, width: usize) -> Result<Vec<LabeledImage>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<_> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "png"))
        })
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for (i, p) in paths.iter().enumerate() {
        match GrayImage::read(p).and_then(|img| img.resize_bilinear(height, width)) {
            Ok(pixels) => {
                let sidecar = p.with_extension("labels.csv");
                let labels = if sidecar.exists() {
                    let text =
                        std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
                    Some(LabelGrid::from_csv(&text)?)
                } else {
                    None
                };
                out.push(LabeledImage {
                    pixels,
                    labels,
                    seed: i as u64,
                })
            }
            Err(e) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    if out.is_empty() {
        return Err(Error::Data(format!(
            "no decodable PGM/PNG images in {}",
            dir.display()
        )));
    }
    Ok(out)
}

/// The training corpus of `cfg`: the image folder when `data_dir` is set,
/// otherwise `n_images` synthetic images from `data_seed`.
pub fn load_dataset(cfg: &crate::RunConfig) -> Result<Vec<LabeledImage>> {
    if cfg.data_dir.is_empty() {
        generate_synthetic(
            cfg.data_seed,
            cfg.image_height,
            cfg.image_width,
            cfg.patch_size,
            cfg.n_images,
        )
    } else {
        load_folder(Path::new(&cfg.data_dir), cfg.image_height, cfg.image_width)
    }
}

/// Horizontal flip with probability 1/2 (when enabled), then additive
/// Gaussian noise and clamping to [0, 1].
pub fn augment(img: &LabeledImage, rng: &mut ChaCha8Rng, sigma: f64, flip: bool) -> LabeledImage {
    let do_flip = rng.gen_bool(0.5);
    let mut out = if flip && do_flip {
        img.flip_horizontal()
    } else {
        img.clone()
    };
    if sigma > 0.0 {
        let noise = Normal::new(0.0f32, sigma as f32).expect("finite sigma");
        for p in out.pixels.pixels_mut() {
            *p += noise.sample(rng);
        }
        out.pixels.clamp01();
    }
    out
}

/// Write `<stem>.pgm` (and `<stem>.labels.csv` when labels exist).
pub fn write_labeled(img: &LabeledImage, dir: &Path, stem: &str) -> Result<()> {
    img.pixels.write_pgm(&dir.join(format!("{stem}.pgm")))?;
    if let Some(l) = &img.labels {
        let p = dir.join(format!("{stem}.labels.csv"));
        std::fs::write(&p, l.to_csv()).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn generator_is_deterministic() {
        let a = generate_synthetic(7, 64, 64, 16, 3).unwrap();
        let b = generate_synthetic(7, 64, 64, 16, 3).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(8, 64, 64, 16, 3).unwrap();
        assert_ne!(a[0].pixels, c[0].pixels);
        assert!(generate_synthetic(7, 64, 64, 16, 0).unwrap().is_empty());
        assert!(generate_synthetic(7, 60, 64, 16, 1).is_err());
    }

    #[test]
    fn generated_values_are_in_range() {
        for img in generate_synthetic(3, 128, 128, 16, 10).unwrap() {
            assert!(img.pixels.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
            let l = img.labels.unwrap();
            assert_eq!((l.rows(), l.cols()), (8, 8));
            assert!(l.classes().iter().all(|&c| (c as usize) < N_CLASSES));
        }
    }

    #[test]
    fn tooth_patch_share_is_plausible() {
        // census over 1,000 images; bounds frozen after tuning the generator
        let imgs = generate_synthetic(2024, 128, 128, 16, 1000).unwrap();
        let mut counts = [0usize; N_CLASSES];
        for img in &imgs {
            for &c in img.labels.as_ref().unwrap().classes() {
                counts[c as usize] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        let tooth = counts[TOOTH as usize] as f64 / total as f64;
        // measured 0.267
        assert!(
            (0.20..=0.35).contains(&tooth),
            "tooth share {tooth}, counts {counts:?}"
        );
        assert!(counts[RESTORATION as usize] > 0);
        assert!(counts[APPLIANCE as usize] > 0, "{counts:?}");
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = generate_synthetic(1, 64, 64, 16, 1).unwrap().remove(0);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
    }

    #[test]
    fn augment_without_noise_or_flip_is_identity() {
        let img = generate_synthetic(1, 64, 64, 16, 1).unwrap().remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..4 {
            assert_eq!(augment(&img, &mut rng, 0.0, false), img);
        }
    }

    #[test]
    fn augment_flips_pixels_and_labels_together() {
        let img = generate_synthetic(5, 64, 64, 16, 1).unwrap().remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut flipped = 0;
        for _ in 0..40 {
            let a = augment(&img, &mut rng, 0.0, true);
            if a != img {
                assert_eq!(a, img.flip_horizontal());
                flipped += 1;
            }
        }
        assert!((8..=32).contains(&flipped), "{flipped}");
    }

    #[test]
    fn noise_magnitude_matches_half_normal_mean() {
        let img = LabeledImage {
            pixels: GrayImage::filled(256, 256, 0.5),
            labels: None,
            seed: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = augment(&img, &mut rng, 0.02, false);
        let mad: f64 = a
            .pixels
            .pixels()
            .iter()
            .map(|&p| (p as f64 - 0.5).abs())
            .sum::<f64>()
            / (256.0 * 256.0);
        let expect = 0.02 * (2.0 / std::f64::consts::PI).sqrt();
        assert!((mad - expect).abs() <= 0.2 * expect, "{mad} vs {expect}");
    }

    #[test]
    fn labels_csv_round_trip() {
        let l = LabelGrid::new(2, 3, vec![0, 1, 2, 3, 0, 1]).unwrap();
        assert_eq!(l.to_csv(), "0,1,2\n3,0,1\n");
        assert_eq!(LabelGrid::from_csv(&l.to_csv()).unwrap(), l);
        assert!(LabelGrid::new(1, 1, vec![4]).is_err());
    }

    #[test]
    fn folder_loading() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_folder(dir.path(), 32, 32).is_err());
        let imgs = generate_synthetic(4, 64, 64, 16, 2).unwrap();
        for (i, img) in imgs.iter().enumerate() {
            write_labeled(img, dir.path(), &format!("img{i}")).unwrap();
        }
        std::fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
        let loaded = load_folder(dir.path(), 64, 64).unwrap();
        assert_eq!(loaded.len(), 2);
        for (a, b) in loaded.iter().zip(&imgs) {
            assert_eq!(a.labels, b.labels);
            for (x, y) in a.pixels.pixels().iter().zip(b.pixels.pixels()) {
                assert!((x - y).abs() <= 1.0 / 255.0);
            }
        }
        let small = load_folder(dir.path(), 32, 48).unwrap();
        assert_eq!(
            (small[0].pixels.height(), small[0].pixels.width()),
            (32, 48)
        );
    }
}
