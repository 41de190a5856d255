use std::sync::Arc;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, T),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LogClamped(Var, T),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    L2Normalize {
        x: Var,
        eps: T,
        norms: Vec<T>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    SubstituteRows {
        x: Var,
        token: Var,
        rows: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        groups: Arc<Vec<Vec<usize>>>,
        heads: usize,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRowBias(..) => "add_row_bias",
            Op::Scale(..) => "scale",
            Op::Abs(..) => "abs",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Softmax(..) => "softmax",
            Op::LogClamped(..) => "log_clamped",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::GatherRows { .. } => "gather_rows",
            Op::SubstituteRows { .. } => "substitute_rows",
            Op::Attention { .. } => "attention",
        }
    }
}

/// Reverse-mode tape. Values are appended in evaluation order, so every
/// node's inputs precede it and `backward` is a single reverse sweep.
#[derive(Debug)]
pub struct Graph<T: Scalar = f32> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    needs_grad: Vec<bool>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * x * (T::one() + t)
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let id = self.values.len();
        self.values.push(value.with_requires_grad(needs_grad));
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        Var(id)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.needs_grad[v.0])
    }

    /// Record a leaf. Its gradient is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor.with_requires_grad(true), Op::Leaf, true)
    }

    /// Copy of `x` cut off from the tape (stop-gradient).
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.values[x.0].clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.values[v.0].grad()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.ops[v.0].name()
    }

    /// First recorded value (in evaluation order) containing a NaN or
    /// infinity, as `(var, op name)`.
    pub fn first_non_finite(&self) -> Option<(Var, &'static str)> {
        self.values
            .iter()
            .position(|t| !t.is_finite())
            .map(|i| (Var(i), self.ops[i].name()))
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.values[v.0].shape();
        if s.len() != 2 {
            return Err(Error::shape(
                op,
                format!("expected a matrix, got shape {s:?}"),
            ));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.values[a.0].shape(), self.values[b.0].shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("[{m}, {k}] x [{k2}, {n}]: inner dimensions differ"),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.values[a.0].data(),
            false,
            self.values[b.0].data(),
            false,
            &mut out,
            false,
        );
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", x)?;
        let src = self.values[x.0].data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), ng))
    }

    fn zip_map(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_map("add", a, b, |x, y| x + y)?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_map("sub", a, b, |x, y| x - y)?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_map("mul", a, b, |x, y| x * y)?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// `x[r, :] + bias` for every row `r`; the only broadcast supported.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let tx = &self.values[x.0];
        let tb = &self.values[bias.0];
        let c = tx.cols();
        if tb.numel() != c {
            return Err(Error::shape(
                "add_row_bias",
                format!(
                    "bias {:?} does not match rows of {:?}",
                    tb.shape(),
                    tx.shape()
                ),
            ));
        }
        let b = tb.data();
        let data = tx
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &w)| v + w))
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.any_grad(&[x, bias]);
        Ok(self.push(t, Op::AddRowBias(x, bias), ng))
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let h = self.matmul(x, weight)?;
        self.add_row_bias(h, bias)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let tx = &self.values[x.0];
        let t = Tensor::new(
            tx.shape().to_vec(),
            tx.data().iter().map(|&v| v * factor).collect(),
        )?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(t, Op::Scale(x, factor), ng))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let tx = &self.values[x.0];
        let t = Tensor::new(
            tx.shape().to_vec(),
            tx.data().iter().map(|v| v.abs()).collect(),
        )?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(t, Op::Abs(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.values[x.0].data().iter().copied().sum();
        let ng = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), ng))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = &self.values[x.0];
        let n = T::from_f64(tx.numel() as f64);
        let s = tx.data().iter().copied().sum::<T>() / n;
        let ng = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), ng))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = &self.values[x.0];
        let c = tx.cols();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z = z + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / z);
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(t, Op::Softmax(x), ng))
    }

    /// `ln(max(x, floor))` elementwise; zero gradient where clamped.
    pub fn log_clamped(&mut self, x: Var, floor: T) -> Result<Var> {
        let tx = &self.values[x.0];
        let t = Tensor::new(
            tx.shape().to_vec(),
            tx.data().iter().map(|&v| v.max(floor).ln()).collect(),
        )?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(t, Op::LogClamped(x, floor), ng))
    }

    /// Per-row normalization to zero mean / unit population variance,
    /// followed by an elementwise affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let tx = &self.values[x.0];
        let d = tx.cols();
        let (g, b) = (self.values[gain.0].data(), self.values[bias.0].data());
        if g.len() != d || b.len() != d {
            return Err(Error::shape(
                "layer_norm",
                format!("affine length {}/{} vs feature size {d}", g.len(), b.len()),
            ));
        }
        let dn = T::from_f64(d as f64);
        let rows = tx.rows();
        let mut xhat = vec![T::zero(); tx.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); tx.numel()];
        for (r, row) in tx.data().chunks(d).enumerate() {
            let mu = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mu) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let ng = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let tx = &self.values[x.0];
        let t = Tensor::new(
            tx.shape().to_vec(),
            tx.data().iter().map(|&v| gelu_fwd(v)).collect(),
        )?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(t, Op::Gelu(x), ng))
    }

    /// Each row divided by `max(‖row‖₂, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::Contract("l2_normalize eps must be positive".into()));
        }
        let tx = &self.values[x.0];
        let c = tx.cols();
        let mut norms = Vec::with_capacity(tx.rows());
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let denom = n.max(eps);
            row.iter_mut().for_each(|v| *v = *v / denom);
            norms.push(n);
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(t, Op::L2Normalize { x, eps, norms }, ng))
    }

    /// Rows of `x` in `idx` order. Backward scatter-adds.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2("gather_rows", x)?;
        if idx.is_empty() {
            return Err(Error::Contract(
                "gather_rows with an empty index list".into(),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Contract(format!(
                "gather_rows index {bad} out of range for {r} rows"
            )));
        }
        let src = self.values[x.0].data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(vec![idx.len(), c], out)?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(
            t,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Replace the listed rows of `x` with the row vector `token`.
    pub fn substitute_rows(&mut self, x: Var, token: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2("substitute_rows", x)?;
        let tok = self.values[token.0].data();
        if tok.len() != c {
            return Err(Error::shape(
                "substitute_rows",
                format!("token length {} vs row width {c}", tok.len()),
            ));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Contract(format!(
                "substitute_rows index {bad} out of range for {r} rows"
            )));
        }
        let mut out = self.values[x.0].data().to_vec();
        for &i in rows {
            out[i * c..(i + 1) * c].copy_from_slice(tok);
        }
        let t = Tensor::new(vec![r, c], out)?;
        let ng = self.any_grad(&[x, token]);
        Ok(self.push(
            t,
            Op::SubstituteRows {
                x,
                token,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    /// Multi-head scaled dot-product attention restricted to groups of rows
    /// (windows). `groups` must partition the rows of `q`; `q`, `k`, `v`
    /// share shape `[R, C]` with `C` divisible by `heads`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        groups: Arc<Vec<Vec<usize>>>,
        heads: usize,
    ) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let (r, c) = self.dims2("attention", q)?;
        if heads == 0 || c % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("width {c} not divisible by {heads} heads"),
            ));
        }
        let mut seen = vec![false; r];
        for &i in groups.iter().flatten() {
            if i >= r || seen[i] {
                return Err(Error::Contract(format!(
                    "attention groups must partition {r} rows (row {i})"
                )));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Contract(
                "attention groups leave rows uncovered".into(),
            ));
        }
        let dh = c / heads;
        let scale = T::one() / T::from_f64(dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.values[q.0].data(),
            self.values[k.0].data(),
            self.values[v.0].data(),
        );
        let mut out = vec![T::zero(); r * c];
        let mut probs =
            Vec::with_capacity(groups.iter().map(|g| g.len() * g.len()).sum::<usize>() * heads);
        for g in groups.iter() {
            let n = g.len();
            for h in 0..heads {
                let off = h * dh;
                let base = probs.len();
                for (a, &ra) in g.iter().enumerate() {
                    let qa = &qd[ra * c + off..ra * c + off + dh];
                    let mut m = T::neg_infinity();
                    for &rb in g {
                        let kb = &kd[rb * c + off..rb * c + off + dh];
                        let s = qa.iter().zip(kb).map(|(&x, &y)| x * y).sum::<T>() * scale;
                        probs.push(s);
                        m = m.max(s);
                    }
                    let row = &mut probs[base + a * n..base + (a + 1) * n];
                    let mut z = T::zero();
                    for p in row.iter_mut() {
                        *p = (*p - m).exp();
                        z = z + *p;
                    }
                    row.iter_mut().for_each(|p| *p = *p / z);
                    let o = &mut out[ra * c + off..ra * c + off + dh];
                    for (bi, &rb) in g.iter().enumerate() {
                        let p = probs[base + a * n + bi];
                        let vb = &vd[rb * c + off..rb * c + off + dh];
                        o.iter_mut().zip(vb).for_each(|(o, &y)| *o = *o + p * y);
                    }
                }
            }
        }
        let t = Tensor::new(vec![r, c], out)?;
        let ng = self.any_grad(&[q, k, v]);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss` (seed gradient 1). Gradients are
    /// added into every tensor that requires grad; leaves that receive no
    /// contribution get a zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.values[loss.0].is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..n).rev() {
            if !self.needs_grad[id] {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            self.values[id].accumulate_grad(&g);
        }
        for (t, ng) in self.values.iter_mut().zip(&self.needs_grad) {
            if *ng && t.grad().is_none() {
                let z = vec![T::zero(); t.numel()];
                t.accumulate_grad(&z);
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let needs = &self.needs_grad;
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !needs[v.0] {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(contrib).for_each(|(a, b)| *a = *a + b),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| &self.values[v.0];
        let out = &self.values[id];
        match &self.ops[id] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let nn = val(*b).shape()[1];
                if needs[a.0] {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, nn, k, g, false, val(*b).data(), true, &mut da, false);
                    acc(*a, da);
                }
                if needs[b.0] {
                    let mut db = vec![T::zero(); k * nn];
                    T::gemm(k, m, nn, val(*a).data(), true, g, false, &mut db, false);
                    acc(*b, db);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                acc(*x, dx);
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (da, db) = (val(*a).data(), val(*b).data());
                acc(*a, g.iter().zip(db).map(|(&x, &y)| x * y).collect());
                acc(*b, g.iter().zip(da).map(|(&x, &y)| x * y).collect());
            }
            Op::AddRowBias(x, b) => {
                acc(*x, g.to_vec());
                if needs[b.0] {
                    let c = val(*b).numel();
                    let mut db = vec![T::zero(); c];
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
                    }
                    acc(*b, db);
                }
            }
            Op::Scale(x, f) => acc(*x, g.iter().map(|&v| v * *f).collect()),
            Op::Abs(x) => {
                let xd = val(*x).data();
                acc(
                    *x,
                    g.iter()
                        .zip(xd)
                        .map(|(&gv, &xv)| {
                            if xv > T::zero() {
                                gv
                            } else if xv < T::zero() {
                                -gv
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                );
            }
            Op::Sum(x) => acc(*x, vec![g[0]; val(*x).numel()]),
            Op::Mean(x) => {
                let n = val(*x).numel();
                acc(*x, vec![g[0] / T::from_f64(n as f64); n]);
            }
            Op::Softmax(x) => {
                let c = out.cols();
                let mut dx = vec![T::zero(); out.numel()];
                for ((y, gy), d) in out.data().chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                    let dot = y.iter().zip(gy).map(|(&a, &b)| a * b).sum::<T>();
                    for j in 0..c {
                        d[j] = y[j] * (gy[j] - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::LogClamped(x, floor) => {
                let xd = val(*x).data();
                acc(
                    *x,
                    g.iter()
                        .zip(xd)
                        .map(|(&gv, &xv)| if xv > *floor { gv / xv } else { T::zero() })
                        .collect(),
                );
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = out.cols();
                let gd = val(*gain).data();
                if needs[x.0] {
                    let dn = T::from_f64(d as f64);
                    let mut dx = vec![T::zero(); out.numel()];
                    for (r, rs) in rstd.iter().enumerate() {
                        let gy = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dxh = gy[j] * gd[j];
                            s1 = s1 + dxh;
                            s2 = s2 + dxh * xh[j];
                        }
                        for j in 0..d {
                            let dxh = gy[j] * gd[j];
                            dx[r * d + j] = *rs / dn * (dn * dxh - s1 - xh[j] * s2);
                        }
                    }
                    acc(*x, dx);
                }
                if needs[gain.0] || needs[bias.0] {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for (gy, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] = dg[j] + gy[j] * xh[j];
                            db[j] = db[j] + gy[j];
                        }
                    }
                    acc(*gain, dg);
                    acc(*bias, db);
                }
            }
            Op::Gelu(x) => {
                let xd = val(*x).data();
                acc(
                    *x,
                    g.iter()
                        .zip(xd)
                        .map(|(&gv, &xv)| gv * gelu_grad(xv))
                        .collect(),
                );
            }
            Op::L2Normalize { x, eps, norms } => {
                let c = out.cols();
                let mut dx = vec![T::zero(); out.numel()];
                for (r, &nrm) in norms.iter().enumerate() {
                    let y = &out.data()[r * c..(r + 1) * c];
                    let gy = &g[r * c..(r + 1) * c];
                    let d = &mut dx[r * c..(r + 1) * c];
                    if nrm > *eps {
                        let dot = y.iter().zip(gy).map(|(&a, &b)| a * b).sum::<T>();
                        for j in 0..c {
                            d[j] = (gy[j] - y[j] * dot) / nrm;
                        }
                    } else {
                        for j in 0..c {
                            d[j] = gy[j] / *eps;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::GatherRows { x, idx } => {
                let c = out.cols();
                let mut dx = vec![T::zero(); val(*x).numel()];
                for (o, &i) in idx.iter().enumerate() {
                    let src = &g[o * c..(o + 1) * c];
                    dx[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, &b)| *a = *a + b);
                }
                acc(*x, dx);
            }
            Op::SubstituteRows { x, token, rows } => {
                let c = out.cols();
                if needs[x.0] {
                    let mut dx = g.to_vec();
                    for &i in rows {
                        dx[i * c..(i + 1) * c]
                            .iter_mut()
                            .for_each(|v| *v = T::zero());
                    }
                    acc(*x, dx);
                }
                if needs[token.0] {
                    let mut dt = vec![T::zero(); c];
                    for &i in rows {
                        dt.iter_mut()
                            .zip(&g[i * c..(i + 1) * c])
                            .for_each(|(a, &b)| *a = *a + b);
                    }
                    acc(*token, dt);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
                probs,
            } => {
                let c = out.cols();
                let dh = c / heads;
                let scale = T::one() / T::from_f64(dh as f64).sqrt();
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let mut dq = vec![T::zero(); qd.len()];
                let mut dk = vec![T::zero(); kd.len()];
                let mut dv = vec![T::zero(); vd.len()];
                let mut base = 0;
                let mut ds = Vec::new();
                for grp in groups.iter() {
                    let n = grp.len();
                    for h in 0..*heads {
                        let off = h * dh;
                        let p = &probs[base..base + n * n];
                        ds.clear();
                        ds.resize(n * n, T::zero());
                        for (a, &ra) in grp.iter().enumerate() {
                            let go = &g[ra * c + off..ra * c + off + dh];
                            let mut dot = T::zero();
                            for (bi, &rb) in grp.iter().enumerate() {
                                let vb = &vd[rb * c + off..rb * c + off + dh];
                                let dp = go.iter().zip(vb).map(|(&x, &y)| x * y).sum::<T>();
                                let pab = p[a * n + bi];
                                ds[a * n + bi] = dp;
                                dot = dot + dp * pab;
                                let dvb = &mut dv[rb * c + off..rb * c + off + dh];
                                dvb.iter_mut().zip(go).for_each(|(d, &x)| *d = *d + pab * x);
                            }
                            for bi in 0..n {
                                ds[a * n + bi] = p[a * n + bi] * (ds[a * n + bi] - dot) * scale;
                            }
                        }
                        for (a, &ra) in grp.iter().enumerate() {
                            for (bi, &rb) in grp.iter().enumerate() {
                                let s = ds[a * n + bi];
                                if s == T::zero() {
                                    continue;
                                }
                                for j in 0..dh {
                                    dq[ra * c + off + j] =
                                        dq[ra * c + off + j] + s * kd[rb * c + off + j];
                                    dk[rb * c + off + j] =
                                        dk[rb * c + off + j] + s * qd[ra * c + off + j];
                                }
                            }
                        }
                        base += n * n;
                    }
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
        }
    }
}
