//! Checkpoint files: a text manifest followed by raw little-endian f32.
//!
//! ```text
//! SDMIM-CHECKPOINT
//! version 1
//! epoch 3
//! step 24
//! opt_t 24
//! config image_height=128
//! ...
//! tensor patch_embed.weight 256,64 0 16384
//! tensor opt.m.patch_embed.weight 256,64 16384 16384
//! ...
//! end
//! <payload>
//! ```
//!
//! Tensor offsets and lengths count f32 elements from the start of the
//! payload. Every parameter appears once as itself and once each under the
//! `opt.m.` and `opt.v.` prefixes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::autodiff::Tensor;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::training::OptimizerState;

pub const MAGIC: &str = "SDMIM-CHECKPOINT";
pub const VERSION: u32 = 1;

/// Everything needed to resume a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: ModelParams,
    pub opt: OptimizerState,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!(
            "{MAGIC}\nversion {VERSION}\nepoch {}\nstep {}\nopt_t {}\n",
            self.epoch, self.step, self.opt.t
        );
        for (k, v) in self.config.entries() {
            let _ = writeln!(header, "config {k}={v}");
        }
        let mut payload: Vec<&[f32]> = Vec::new();
        let mut offset = 0usize;
        let mut entry = |header: &mut String, name: &str, shape: &[usize], data: &'_ [f32]| {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(
                header,
                "tensor {name} {} {offset} {}",
                dims.join(","),
                data.len()
            );
            offset += data.len();
        };
        for p in self.model.store.iter() {
            entry(&mut header, &p.name, p.tensor.shape(), p.tensor.data());
            payload.push(p.tensor.data());
        }
        for (prefix, moments) in [("opt.m.", &self.opt.m), ("opt.v.", &self.opt.v)] {
            for (p, buf) in self.model.store.iter().zip(moments.iter()) {
                entry(
                    &mut header,
                    &format!("{prefix}{}", p.name),
                    p.tensor.shape(),
                    buf,
                );
                payload.push(buf);
            }
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.reserve(offset * 4);
        for chunk in payload {
            for v in chunk {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Parse a checkpoint. `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        let magic_len = MAGIC.len() + 1;
        if bytes.len() < magic_len || &bytes[..magic_len] != format!("{MAGIC}\n").as_bytes() {
            return Err(fail("bad magic, not a checkpoint file".into()));
        }
        let end = find_header_end(bytes)
            .ok_or_else(|| fail("truncated header (no `end` line)".into()))?;
        let header =
            std::str::from_utf8(&bytes[..end]).map_err(|_| fail("header is not UTF-8".into()))?;
        let payload = &bytes[end..];

        let mut version = None;
        let (mut epoch, mut step, mut opt_t) = (None, None, None);
        let mut config = RunConfig::default();
        let mut tensors: Vec<Entry> = Vec::new();
        for line in header.lines().skip(1) {
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            let num = |s: &str| {
                s.parse::<u64>()
                    .map_err(|_| fail(format!("bad `{key}` line: {line:?}")))
            };
            match key {
                "version" => {
                    let v = num(rest)?;
                    if v != VERSION as u64 {
                        return Err(fail(format!("unsupported version {v}, expected {VERSION}")));
                    }
                    version = Some(v);
                }
                "epoch" => epoch = Some(num(rest)?),
                "step" => step = Some(num(rest)?),
                "opt_t" => opt_t = Some(num(rest)?),
                "config" => {
                    let (k, v) = rest
                        .split_once('=')
                        .ok_or_else(|| fail(format!("bad config line: {line:?}")))?;
                    config.set(k, v)?;
                }
                "tensor" => tensors.push(
                    Entry::parse(rest).ok_or_else(|| fail(format!("bad tensor line: {line:?}")))?,
                ),
                "end" => break,
                _ => return Err(fail(format!("unknown header line: {line:?}"))),
            }
        }
        if version.is_none() {
            return Err(fail("missing version".into()));
        }
        let need = |v: Option<u64>, what: &str| v.ok_or_else(|| fail(format!("missing `{what}`")));
        let (epoch, step, opt_t) = (
            need(epoch, "epoch")?,
            need(step, "step")?,
            need(opt_t, "opt_t")?,
        );

        let total: usize = tensors.iter().map(|t| t.len).sum();
        if payload.len() != total * 4 {
            return Err(fail(format!(
                "payload has {} bytes, manifest describes {} (truncated or corrupt)",
                payload.len(),
                total * 4
            )));
        }
        let read = |e: &Entry| -> Result<Vec<f32>> {
            let n: usize = e.shape.iter().product();
            if n != e.len || (e.offset + e.len) * 4 > payload.len() {
                return Err(fail(format!(
                    "tensor `{}` has an inconsistent manifest entry",
                    e.name
                )));
            }
            Ok(payload[e.offset * 4..(e.offset + e.len) * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };

        let mut model = ModelParams::zeros(&config)?;
        let n = model.store.len();
        if tensors.len() != 3 * n {
            return Err(fail(format!(
                "expected {} tensors for this config, found {}",
                3 * n,
                tensors.len()
            )));
        }
        let mut opt = OptimizerState::new(&model.store);
        opt.t = opt_t;
        for i in 0..n {
            let p = model.store.get_mut(i);
            for (slot, prefix) in [(0, ""), (1, "opt.m."), (2, "opt.v.")] {
                let e = &tensors[slot * n + i];
                let expected = format!("{prefix}{}", p.name);
                if e.name != expected {
                    return Err(fail(format!(
                        "expected tensor `{expected}`, found `{}`",
                        e.name
                    )));
                }
                if e.shape != p.tensor.shape() {
                    return Err(fail(format!(
                        "shape mismatch for tensor `{}`: file has {:?}, config expects {:?}",
                        e.name,
                        e.shape,
                        p.tensor.shape()
                    )));
                }
                let data = read(e)?;
                match slot {
                    0 => p.tensor = Tensor::new(e.shape.clone(), data)?,
                    1 => opt.m[i] = data,
                    _ => opt.v[i] = data,
                }
            }
        }
        Ok(Checkpoint {
            config,
            model,
            opt,
            epoch: epoch as usize,
            step,
        })
    }

    /// Check that this checkpoint's model fits `cfg`, naming the first
    /// tensor whose shape differs.
    pub fn check_compatible(&self, cfg: &RunConfig) -> Result<()> {
        let expected = ModelParams::zeros(cfg)?;
        for (a, b) in expected.store.iter().zip(self.model.store.iter()) {
            if a.tensor.shape() != b.tensor.shape() || a.name != b.name {
                return Err(Error::shape(
                    "checkpoint",
                    format!(
                        "tensor `{}` has shape {:?}, config expects `{}` {:?}",
                        b.name,
                        b.tensor.shape(),
                        a.name,
                        a.tensor.shape()
                    ),
                ));
            }
        }
        if expected.store.len() != self.model.store.len() {
            return Err(Error::shape(
                "checkpoint",
                format!(
                    "{} tensors, config expects {}",
                    self.model.store.len(),
                    expected.store.len()
                ),
            ));
        }
        Ok(())
    }
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

impl Entry {
    fn parse(s: &str) -> Option<Entry> {
        let mut it = s.split(' ');
        let name = it.next()?.to_string();
        let shape = it
            .next()?
            .split(',')
            .map(|d| d.parse().ok())
            .collect::<Option<Vec<usize>>>()?;
        let offset = it.next()?.parse().ok()?;
        let len = it.next()?.parse().ok()?;
        if it.next().is_some() {
            return None;
        }
        Some(Entry {
            name,
            shape,
            offset,
            len,
        })
    }
}

fn find_header_end(bytes: &[u8]) -> Option<usize> {
    let mut start = 0;
    while start < bytes.len() {
        let nl = bytes[start..].iter().position(|&b| b == b'\n')? + start;
        if &bytes[start..nl] == b"end" {
            return Some(nl + 1);
        }
        start = nl + 1;
    }
    None
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

/// Path of the checkpoint written after `epoch` completed epochs.
pub fn epoch_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("checkpoint-epoch{epoch:04}.ckpt"))
}
