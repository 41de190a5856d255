//! Single-channel float images, 8-bit PGM/PNG I/O and bilinear resizing.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major grayscale image. Pixel values are nominally in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::shape(
                "image",
                format!("{height}x{width} image with {} pixels", pixels.len()),
            ));
        }
        Ok(GrayImage {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        GrayImage::new(height, width, vec![value; height * width]).expect("positive size")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn clamp01(&mut self) {
        self.pixels.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
    }

    pub fn flip_horizontal(&self) -> GrayImage {
        let mut out = self.clone();
        for (dst, src) in out
            .pixels
            .chunks_mut(self.width)
            .zip(self.pixels.chunks(self.width))
        {
            dst.iter_mut()
                .zip(src.iter().rev())
                .for_each(|(d, &s)| *d = s);
        }
        out
    }

    /// Concatenate equal-height images left to right.
    pub fn hconcat(parts: &[&GrayImage]) -> Result<GrayImage> {
        let h = parts.first().map_or(0, |p| p.height);
        if parts.iter().any(|p| p.height != h) {
            return Err(Error::shape("hconcat", "images differ in height"));
        }
        let w: usize = parts.iter().map(|p| p.width).sum();
        let mut pixels = Vec::with_capacity(h * w);
        for y in 0..h {
            for p in parts {
                pixels.extend_from_slice(&p.pixels[y * p.width..(y + 1) * p.width]);
            }
        }
        GrayImage::new(h, w, pixels)
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<GrayImage> {
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        if height == 0 || width == 0 {
            return Err(Error::shape("resize", format!("target {height}x{width}")));
        }
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        let mut out = Vec::with_capacity(height * width);
        for y in 0..height {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f32;
            for x in 0..width {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f32;
                let top = self.get(y0, x0) * (1.0 - tx) + self.get(y0, x1) * tx;
                let bot = self.get(y1, x0) * (1.0 - tx) + self.get(y1, x1) * tx;
                out.push(top * (1.0 - ty) + bot * ty);
            }
        }
        GrayImage::new(height, width, out)
    }

    /// 8-bit quantization of the clamped pixels.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8], maxval: u16) -> Result<GrayImage> {
        let scale = 1.0 / maxval as f32;
        GrayImage::new(
            height,
            width,
            bytes.iter().map(|&b| b as f32 * scale).collect(),
        )
    }

    /// Binary 8-bit PGM (P5).
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut buf = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        buf.extend(self.to_bytes());
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    /// Decode an 8-bit grayscale PGM or PNG into [0, 1].
    pub fn read(path: &Path) -> Result<GrayImage> {
        let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let luma = img.into_luma8();
        let (w, h) = luma.dimensions();
        GrayImage::from_bytes(h as usize, w as usize, luma.as_raw(), 255)
    }
}
