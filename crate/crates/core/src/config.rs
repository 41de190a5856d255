//! Flat `key = value` run configuration.
//!
//! Every pretraining hyperparameter has a named key. Defaults follow the
//! reference protocol (lr 8e-4, wd 0.05, betas 0.9/0.999, mask ratio 0.2,
//! alpha 0.2, 100 epochs with 10 warmup, 16×16 patches); the architecture
//! defaults are the desk-scale Swin-lite.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::objective;

trait ConfigValue: Sized {
    fn parse(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! numeric_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse(s: &str) -> std::result::Result<Self, String> {
                s.parse::<$t>().map_err(|e| format!("cannot parse {s:?}: {e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

numeric_value!(usize, u64, f64);

impl ConfigValue for bool {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "true" | "on" | "yes" | "1" => Ok(true),
            "false" | "off" | "no" | "0" => Ok(false),
            _ => Err(format!("expected on/off, got {s:?}")),
        }
    }
    fn render(&self) -> String {
        if *self { "on" } else { "off" }.to_string()
    }
}

impl ConfigValue for String {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        Ok(s.to_string())
    }
    fn render(&self) -> String {
        self.clone()
    }
}

macro_rules! run_config {
    ($( $(#[$doc:meta])* $name:ident : $ty:ty = $default:expr, )*) => {
        /// Every knob of a run. See the module docs for the file format.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $( $(#[$doc])* pub $name: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $( $name: $default, )* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$( stringify!($name) ),*];

            /// Set one field from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key.trim() {
                    $( stringify!($name) => {
                        self.$name = <$ty as ConfigValue>::parse(value)
                            .map_err(|m| Error::config(stringify!($name), m))?;
                    } )*
                    other => return Err(Error::config(other, "unknown key")),
                }
                Ok(())
            }

            /// `(key, value)` pairs in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$( (stringify!($name), ConfigValue::render(&self.$name)) ),*]
            }
        }
    };
}

run_config! {
    /// Image height after resizing.
    image_height: usize = 128,
    image_width: usize = 128,
    patch_size: usize = 16,
    /// Token width D′ after the patch projection.
    embed_dim: usize = 64,
    encoder_depth: usize = 4,
    decoder_depth: usize = 1,
    heads: usize = 4,
    /// Attention window side, in patches.
    window: usize = 4,
    /// Alternate blocks use windows cyclically shifted by half a window.
    shift_windows: bool = true,
    mlp_ratio: usize = 4,
    head_hidden: usize = 256,
    bottleneck: usize = 256,
    /// Number of distillation logits K.
    head_dim: usize = 4096,
    init_std: f64 = 0.02,
    ln_eps: f64 = 1e-5,
    l2_eps: f64 = 1e-6,
    target_eps: f64 = 1e-6,

    mask_ratio: f64 = 0.2,
    /// Draw fresh masks every epoch (off: one fixed mask per image).
    remask_each_epoch: bool = true,
    alpha: f64 = 0.2,
    /// Reconstruction loss strategy, see `objective::RECONSTRUCTION_LOSSES`.
    loss_mode: String = "masked-only".to_string(),
    distill: bool = true,
    stop_gradient: bool = true,

    base_lr: f64 = 8e-4,
    min_lr: f64 = 0.0,
    weight_decay: f64 = 0.05,
    beta1: f64 = 0.9,
    beta2: f64 = 0.999,
    adam_eps: f64 = 1e-8,
    epochs: usize = 100,
    warmup_epochs: usize = 10,
    /// Images per optimizer step; 0 means the whole training set.
    batch_size: usize = 0,
    /// Global gradient-norm clip; 0 disables clipping.
    grad_clip: f64 = 0.0,

    seed: u64 = 0,
    data_seed: u64 = 0,
    n_images: usize = 64,
    /// Image folder to train on; empty means the synthetic generator.
    data_dir: String = String::new(),
    augment: bool = true,
    noise_sigma: f64 = 0.02,
    out_dir: String = "runs/sdmim".to_string(),
    /// Write a checkpoint every this many epochs (0: only at the end).
    checkpoint_every: usize = 0,
}

impl RunConfig {
    /// Parse a config file body. Blank lines and `#` comments are ignored;
    /// keys not mentioned keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(
                    format!("line {}", lineno + 1),
                    format!("expected key = value, got {line:?}"),
                )
            })?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Apply `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o, "override must be key=value"))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields an identical config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn grid(&self) -> (usize, usize) {
        (
            self.image_height / self.patch_size,
            self.image_width / self.patch_size,
        )
    }

    pub fn n_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    /// Flattened patch length D (single channel).
    pub fn token_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    /// Reject invalid values and combinations, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("head_hidden", self.head_hidden),
            ("bottleneck", self.bottleneck),
            ("head_dim", self.head_dim),
            ("epochs", self.epochs),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.image_height % self.patch_size != 0 {
            return Err(Error::config(
                "image_height",
                format!("not divisible by patch_size {}", self.patch_size),
            ));
        }
        if self.image_width % self.patch_size != 0 {
            return Err(Error::config(
                "image_width",
                format!("not divisible by patch_size {}", self.patch_size),
            ));
        }
        if self.n_patches() < 2 {
            return Err(Error::config(
                "patch_size",
                "image must contain at least two patches",
            ));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::config(
                "heads",
                format!("does not divide embed_dim {}", self.embed_dim),
            ));
        }
        let (rows, cols) = self.grid();
        if self.window == 0 || rows % self.window != 0 || cols % self.window != 0 {
            return Err(Error::config(
                "window",
                format!("must divide the {rows}x{cols} patch grid"),
            ));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::config("mask_ratio", "must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha", "must lie in [0, 1]"));
        }
        objective::reconstruction_loss(&self.loss_mode)?;
        for (field, v) in [
            ("init_std", self.init_std),
            ("ln_eps", self.ln_eps),
            ("l2_eps", self.l2_eps),
            ("target_eps", self.target_eps),
            ("adam_eps", self.adam_eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("base_lr", "must be non-negative"));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.base_lr) {
            return Err(Error::config("min_lr", "must lie in [0, base_lr]"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        for (field, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field, "must lie in [0, 1)"));
            }
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::config(
                "warmup_epochs",
                "must be smaller than epochs",
            ));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::config("grad_clip", "must be non-negative"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma", "must be non-negative"));
        }
        if self.data_dir.is_empty() && self.n_images == 0 {
            return Err(Error::config(
                "n_images",
                "synthetic corpus needs at least one image",
            ));
        }
        Ok(())
    }
}
