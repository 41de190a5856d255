//! Frozen-encoder linear probing of per-patch labels, plus an optional
//! fine-tuning mode that also updates the encoder.

use rand::seq::SliceRandom;

use crate::autodiff::{Graph, Tensor};
use crate::config::RunConfig;
use crate::data::{LabeledImage, N_CLASSES};
use crate::error::{Error, Result};
use crate::model::{ModelParams, NamedParam, ParamStore};
use crate::patching::patchify;
use crate::seeding::{rng_for, stream};
use crate::training::{adamw_step, AdamW, OptimizerState};

pub const PROBE_ITERATIONS: usize = 500;
pub const PROBE_LR: f64 = 0.1;
pub const FINE_TUNE_LR: f64 = 1e-4;
pub const TRAIN_FRACTION: f64 = 0.8;
pub const CSV_HEADER: &str = "variant,seed,overall_acc,acc_class0,acc_class1,acc_class2,acc_class3";

const EXTRACT_CHUNK: usize = 16;

/// Encoder features of every patch, row `i·N + j` for patch `j` of image `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub x: Tensor,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub variant: String,
    pub seed: u64,
    pub overall: f64,
    /// `None` when the class has no test patches.
    pub per_class: [Option<f64>; N_CLASSES],
    pub n_train: usize,
    pub n_test: usize,
}

impl ProbeResult {
    pub fn csv_row(&self) -> String {
        let classes: Vec<String> = self
            .per_class
            .iter()
            .map(|a| a.map_or_else(|| "absent".to_string(), |a| format!("{a:.6}")))
            .collect();
        format!(
            "{},{},{:.6},{}",
            self.variant,
            self.seed,
            self.overall,
            classes.join(",")
        )
    }
}

/// Patch tokens of all images stacked into one `B·N × D` matrix.
fn stacked_tokens(images: &[LabeledImage], model: &ModelParams) -> Result<Tensor> {
    let p = patch_size(model);
    let (n, d) = (model.arch.n_patches(), model.arch.token_dim);
    let mut data = Vec::with_capacity(images.len() * n * d);
    for im in images {
        let tokens = patchify(&im.pixels, p)?;
        if tokens.shape() != [n, d] {
            return Err(Error::shape(
                "extract_features",
                format!(
                    "image gives {:?} tokens, model expects [{n}, {d}]",
                    tokens.shape()
                ),
            ));
        }
        data.extend_from_slice(tokens.data());
    }
    Tensor::new(vec![images.len() * n, d], data)
}

fn patch_size(model: &ModelParams) -> usize {
    (model.arch.token_dim as f64).sqrt().round() as usize
}

/// Run the encoder on every image with all patches visible.
pub fn extract_features(images: &[LabeledImage], model: &ModelParams) -> Result<Features> {
    let n = model.arch.n_patches();
    let e = model.arch.embed_dim;
    let mut x = Vec::with_capacity(images.len() * n * e);
    let mut labels = Vec::with_capacity(images.len() * n);
    for chunk in images.chunks(EXTRACT_CHUNK) {
        let tokens = stacked_tokens(chunk, model)?;
        let mut g: Graph<f32> = Graph::new();
        let params = model.bind(&mut g, false);
        let tokens = g.constant(tokens);
        let emb = model.embed(&mut g, &params, tokens, &[], chunk.len())?;
        let z = model.encoder_forward(&mut g, &params, emb)?;
        x.extend_from_slice(g.value(z).data());
        for im in chunk {
            match &im.labels {
                Some(l) if l.classes().len() == n => labels.extend_from_slice(l.classes()),
                Some(l) => {
                    return Err(Error::shape(
                        "extract_features",
                        format!(
                            "label grid has {} cells, model has {n} patches",
                            l.classes().len()
                        ),
                    ))
                }
                None => return Err(Error::Data("probe images need patch labels".into())),
            }
        }
    }
    if images.is_empty() {
        return Err(Error::Data("no images to extract features from".into()));
    }
    Ok(Features {
        x: Tensor::new(vec![images.len() * n, e], x)?,
        labels,
    })
}

/// Deterministic 80/20 split of `n` rows.
pub fn split_indices(n: usize, split_seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(&[split_seed, stream::SPLIT]));
    let n_train = ((n as f64) * TRAIN_FRACTION).round() as usize;
    let test = idx.split_off(n_train.min(n));
    (idx, test)
}

fn accuracy(pred: &[u8], truth: &[u8]) -> (f64, [Option<f64>; N_CLASSES]) {
    let mut hit = [0usize; N_CLASSES];
    let mut tot = [0usize; N_CLASSES];
    for (&p, &t) in pred.iter().zip(truth) {
        tot[t as usize] += 1;
        if p == t {
            hit[t as usize] += 1;
        }
    }
    let overall = hit.iter().sum::<usize>() as f64 / truth.len().max(1) as f64;
    let mut per = [None; N_CLASSES];
    for k in 0..N_CLASSES {
        if tot[k] > 0 {
            per[k] = Some(hit[k] as f64 / tot[k] as f64);
        }
    }
    (overall, per)
}

fn check_labels(labels: &[u8]) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= N_CLASSES) {
        return Err(Error::Data(format!("label {bad} outside 0..{N_CLASSES}")));
    }
    let mut seen = [false; N_CLASSES];
    labels.iter().for_each(|&l| seen[l as usize] = true);
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::Data(
            "linear probe needs at least two classes".into(),
        ));
    }
    Ok(())
}

/// Multinomial logistic regression on standardized features, trained by
/// full-batch gradient descent (fixed budget, no regularization) on a
/// seeded 80/20 split of the rows.
pub fn linear_probe(features: &Tensor, labels: &[u8], split_seed: u64) -> Result<ProbeResult> {
    let (n, d) = (features.rows(), features.cols());
    if labels.len() != n {
        return Err(Error::shape(
            "linear_probe",
            format!("{n} feature rows, {} labels", labels.len()),
        ));
    }
    check_labels(labels)?;
    let (train, test) = split_indices(n, split_seed);
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data(format!(
            "{n} rows are too few for a train/test split"
        )));
    }

    // standardize with training statistics
    let x = features.data();
    let mut mean = vec![0.0f64; d];
    let mut var = vec![0.0f64; d];
    for &i in &train {
        for j in 0..d {
            mean[j] += x[i * d + j] as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    for &i in &train {
        for j in 0..d {
            var[j] += (x[i * d + j] as f64 - mean[j]).powi(2);
        }
    }
    let scale: Vec<f64> = var
        .iter()
        .map(|v| {
            let s = (v / train.len() as f64).sqrt();
            if s > 1e-12 {
                1.0 / s
            } else {
                0.0
            }
        })
        .collect();
    let row = |i: usize| -> Vec<f64> {
        (0..d)
            .map(|j| (x[i * d + j] as f64 - mean[j]) * scale[j])
            .collect()
    };
    let xtr: Vec<Vec<f64>> = train.iter().map(|&i| row(i)).collect();
    let xte: Vec<Vec<f64>> = test.iter().map(|&i| row(i)).collect();
    let ytr: Vec<u8> = train.iter().map(|&i| labels[i]).collect();
    let yte: Vec<u8> = test.iter().map(|&i| labels[i]).collect();

    let k = N_CLASSES;
    let mut w = vec![0.0f64; d * k];
    let mut b = vec![0.0f64; k];
    let m = xtr.len() as f64;
    let mut gw = vec![0.0f64; d * k];
    let mut logits = vec![0.0f64; k];
    for _ in 0..PROBE_ITERATIONS {
        gw.iter_mut().for_each(|g| *g = 0.0);
        let mut gb = vec![0.0f64; k];
        for (xi, &yi) in xtr.iter().zip(&ytr) {
            softmax_logits(xi, &w, &b, &mut logits);
            logits[yi as usize] -= 1.0;
            for c in 0..k {
                let r = logits[c] / m;
                gb[c] += r;
                for j in 0..d {
                    gw[j * k + c] += r * xi[j];
                }
            }
        }
        w.iter_mut().zip(&gw).for_each(|(w, g)| *w -= PROBE_LR * g);
        b.iter_mut().zip(&gb).for_each(|(b, g)| *b -= PROBE_LR * g);
    }

    let pred: Vec<u8> = xte
        .iter()
        .map(|xi| {
            softmax_logits(xi, &w, &b, &mut logits);
            argmax(&logits) as u8
        })
        .collect();
    let (overall, per_class) = accuracy(&pred, &yte);
    Ok(ProbeResult {
        variant: String::new(),
        seed: split_seed,
        overall,
        per_class,
        n_train: xtr.len(),
        n_test: xte.len(),
    })
}

fn softmax_logits(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let k = out.len();
    out.copy_from_slice(b);
    for (j, &xj) in x.iter().enumerate() {
        for c in 0..k {
            out[c] += xj * w[j * k + c];
        }
    }
    let mx = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    out.iter_mut().for_each(|o| {
        *o = (*o - mx).exp();
        s += *o;
    });
    out.iter_mut().for_each(|o| *o /= s);
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Extract features and probe them; the model is only read.
pub fn probe_model(
    variant: &str,
    images: &[LabeledImage],
    model: &ModelParams,
    split_seed: u64,
) -> Result<ProbeResult> {
    let f = extract_features(images, model)?;
    let mut r = linear_probe(&f.x, &f.labels, split_seed)?;
    r.variant = variant.to_string();
    Ok(r)
}

/// Fine-tuning mode: a linear head on the encoder output is trained jointly
/// with the encoder by AdamW at `FINE_TUNE_LR` on the training patches of
/// the same seeded split, then evaluated on the held-out patches.
pub fn fine_tune_probe(
    variant: &str,
    images: &[LabeledImage],
    model: &ModelParams,
    cfg: &RunConfig,
    split_seed: u64,
    steps: usize,
) -> Result<ProbeResult> {
    let tokens = stacked_tokens(images, model)?;
    let mut labels = Vec::new();
    for im in images {
        labels.extend_from_slice(
            im.labels
                .as_ref()
                .ok_or_else(|| Error::Data("probe images need patch labels".into()))?
                .classes(),
        );
    }
    check_labels(&labels)?;
    let (train, test) = split_indices(labels.len(), split_seed);
    let e = model.arch.embed_dim;

    let mut encoder = model.clone();
    let mut head = ParamStore::from_params(vec![
        NamedParam {
            name: "probe.weight".into(),
            tensor: Tensor::zeros(&[e, N_CLASSES]),
            decay: true,
        },
        NamedParam {
            name: "probe.bias".into(),
            tensor: Tensor::zeros(&[N_CLASSES]),
            decay: false,
        },
    ]);
    let enc_idx = encoder.encoder_params();
    let mut enc_opt = OptimizerState::new(&encoder.store);
    let mut head_opt = OptimizerState::new(&head);
    let hp = AdamW::from_config(cfg);
    let mut onehot = vec![0.0f32; train.len() * N_CLASSES];
    for (r, &i) in train.iter().enumerate() {
        onehot[r * N_CLASSES + labels[i] as usize] = 1.0;
    }
    let onehot = Tensor::new(vec![train.len(), N_CLASSES], onehot)?;

    let forward =
        |g: &mut Graph<f32>, enc: &ModelParams, head: &ParamStore, trainable: bool| -> Result<_> {
            let params = enc.bind(g, trainable);
            let hw = if trainable {
                g.param(head.get(0).tensor.clone())
            } else {
                g.constant(head.get(0).tensor.clone())
            };
            let hb = if trainable {
                g.param(head.get(1).tensor.clone())
            } else {
                g.constant(head.get(1).tensor.clone())
            };
            let tokens = g.constant(tokens.clone());
            let emb = enc.embed(g, &params, tokens, &[], images.len())?;
            let z = enc.encoder_forward(g, &params, emb)?;
            let logits = g.linear(z, hw, hb)?;
            Ok((params, hw, hb, logits))
        };

    for _ in 0..steps {
        let mut g: Graph<f32> = Graph::new();
        let (params, hw, hb, logits) = forward(&mut g, &encoder, &head, true)?;
        let sel = g.gather_rows(logits, &train)?;
        let probs = g.softmax(sel)?;
        let logp = g.log_clamped(probs, 1e-12)?;
        let t = g.constant(onehot.clone());
        let picked = g.mul(logp, t)?;
        let s = g.mean(picked)?;
        let loss = g.scale(s, -(N_CLASSES as f32))?;
        g.backward(loss)?;
        let mut grads: Vec<Option<Vec<f32>>> = vec![Some(Vec::new()); encoder.store.len()];
        for (i, v) in params.vars().iter().enumerate() {
            grads[i] = if enc_idx.contains(&i) {
                g.grad(*v).map(<[f32]>::to_vec)
            } else {
                Some(vec![0.0; encoder.store.get(i).tensor.numel()])
            };
        }
        adamw_step(&mut encoder.store, &grads, &mut enc_opt, &hp, FINE_TUNE_LR)?;
        let hg = vec![
            g.grad(hw).map(<[f32]>::to_vec),
            g.grad(hb).map(<[f32]>::to_vec),
        ];
        adamw_step(&mut head, &hg, &mut head_opt, &hp, FINE_TUNE_LR)?;
    }

    let mut g: Graph<f32> = Graph::new();
    let (_, _, _, logits) = forward(&mut g, &encoder, &head, false)?;
    let lv = g.value(logits);
    let pred: Vec<u8> = test
        .iter()
        .map(|&i| {
            let r: Vec<f64> = lv.row(i).iter().map(|&v| v as f64).collect();
            argmax(&r) as u8
        })
        .collect();
    let truth: Vec<u8> = test.iter().map(|&i| labels[i]).collect();
    let (overall, per_class) = accuracy(&pred, &truth);
    Ok(ProbeResult {
        variant: variant.to_string(),
        seed: split_seed,
        overall,
        per_class,
        n_train: train.len(),
        n_test: test.len(),
    })
}

#[cfg(test)]
mod tests;
