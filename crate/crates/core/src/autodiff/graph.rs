//! Tape of executed operations with reverse-mode differentiation.
//!
//! Nodes are appended in execution order, so the node index is already a
//! topological order; `backward` walks it in reverse.

use std::sync::Arc;

use super::kernels::{axpy, dot, exp_nonpositive, gemm_nn, gemm_nt, gemm_tn, sum, transpose};
use crate::error::{MetroError, Result};
use crate::tensor::Tensor;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    ConcatCols(Vec<Var>),
    SliceRows {
        src: Var,
        start: usize,
    },
    SliceCols {
        src: Var,
        start: usize,
    },
    BroadcastRows(Var),
    ReplaceRows {
        src: Var,
        token: Var,
        masked: Vec<bool>,
    },
    Reshape(Var),
    Gelu(Var),
    Softplus(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    MeanRows(Var),
    Sum(Var),
    L1Mean(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Per-head attention probabilities retained by an attention node.
#[derive(Clone, Copy, Debug)]
pub struct AttentionProbs<'a> {
    pub heads: usize,
    pub tokens: usize,
    pub data: &'a [f64],
}

impl<'a> AttentionProbs<'a> {
    pub fn head(&self, h: usize) -> &'a [f64] {
        let nn = self.tokens * self.tokens;
        &self.data[h * nn..(h + 1) * nn]
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn dims2(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        s => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
    }
}

fn gelu(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stabilized softmax of one row, in place.
fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for x in row.iter_mut() {
        *x = exp_nonpositive(*x - max);
    }
    let inv = 1.0 / sum(row);
    for x in row.iter_mut() {
        *x *= inv;
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient after [`Graph::backward`]; `None` if no gradient reached `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.clone()).expect("gradient shape matches value"))
    }

    pub fn grad_data(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Moves the gradient of `v` out of the graph.
    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads[v.0].take()
    }

    pub fn attention_probs(&self, v: Var) -> Option<AttentionProbs<'_>> {
        match &self.nodes[v.0].op {
            Op::Attention { heads, probs, .. } => Some(AttentionProbs {
                heads: *heads,
                tokens: self.value(v).rows(),
                data: probs,
            }),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        dims2(self.value(v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 {
            return Err(MetroError::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `x·w + b` with `w: in×out` and `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a);
        let t = Tensor::new(vec![n, m], transpose(self.value(a).data(), m, n))?;
        Ok(self.push(t, Op::Transpose(a), &[a]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(MetroError::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    /// Adds a length-`n` bias to every row of an `m×n` tensor.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims2(a);
        if self.value(bias).len() != n {
            return Err(MetroError::dim("add_bias", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (x, y) in row.iter_mut().zip(b) {
                *x += y;
            }
        }
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(t, Op::Scale(a, c), &[a])
    }

    /// Multiplies every entry of `a` by the scalar tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(MetroError::dim("scale_by", self.shape(a), self.shape(s)));
        }
        let c = self.value(s).data()[0];
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::ScaleBy(a, s), &[a, s]))
    }

    /// Concatenates 2-D tensors with equal row counts along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| MetroError::Validation("concat of zero tensors".into()))?;
        let (m, _) = self.dims2(first);
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims2(p);
            if r != m {
                return Err(MetroError::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let (_, c) = self.dims2(p);
                data.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
            }
        }
        let t = Tensor::new(vec![m, total], data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(src);
        if len == 0 || start + len > m {
            return Err(MetroError::dim("slice_rows", self.shape(src), &[start, len]));
        }
        let data = self.value(src).data()[start * n..(start + len) * n].to_vec();
        let t = Tensor::new(vec![len, n], data)?;
        Ok(self.push(t, Op::SliceRows { src, start }, &[src]))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(src);
        if len == 0 || start + len > n {
            return Err(MetroError::dim("slice_cols", self.shape(src), &[start, len]));
        }
        let v = self.value(src).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&v[i * n + start..i * n + start + len]);
        }
        let t = Tensor::new(vec![m, len], data)?;
        Ok(self.push(t, Op::SliceCols { src, start }, &[src]))
    }

    /// Repeats a length-`d` tensor as `rows` identical rows.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        if rows == 0 {
            return Err(MetroError::Validation("broadcast to zero rows".into()));
        }
        let d = self.value(x).len();
        let mut data = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            data.extend_from_slice(self.value(x).data());
        }
        let t = Tensor::new(vec![rows, d], data)?;
        Ok(self.push(t, Op::BroadcastRows(x), &[x]))
    }

    /// Replaces the listed rows of `src` by `token`.
    pub fn replace_rows(&mut self, src: Var, token: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(src);
        if self.value(token).len() != n {
            return Err(MetroError::dim("replace_rows", self.shape(src), self.shape(token)));
        }
        let mut masked = vec![false; m];
        for &r in rows {
            if r >= m {
                return Err(MetroError::Validation(format!(
                    "masked row {r} out of range for {m} rows"
                )));
            }
            masked[r] = true;
        }
        let mut data = self.value(src).data().to_vec();
        let tok = self.value(token).data();
        for (i, row) in data.chunks_exact_mut(n).enumerate() {
            if masked[i] {
                row.copy_from_slice(tok);
            }
        }
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push(t, Op::ReplaceRows { src, token, masked }, &[src, token]))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = Tensor::new(shape, self.value(x).data().to_vec())?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(t, Op::Gelu(x), &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| softplus(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(t, Op::Softplus(x), &[x])
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, d) = self.dims2(x);
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(MetroError::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        if !(eps > 0.0) {
            return Err(MetroError::Validation("layer_norm eps must be positive".into()));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let row = &xv[i * d..(i + 1) * d];
            let mean = sum(row) / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.dims2(a);
        if self.value(a).data().iter().any(|v| v.is_nan()) {
            return Err(MetroError::Numeric("softmax_rows: NaN input".into()));
        }
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::SoftmaxRows(a), &[a]))
    }

    /// Multi-head scaled dot-product self-attention core: `softmax(QKᵀ/√d_h)·V` per head,
    /// heads laid out as contiguous column groups. Probabilities are retained.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (n, d) = self.dims2(q);
        if self.shape(k) != self.shape(q) || self.shape(v) != self.shape(q) {
            return Err(MetroError::dim("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(MetroError::Config(format!("{heads} heads do not divide width {d}")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; heads * n * n];
        let mut out = vec![0.0; n * d];
        for h in 0..heads {
            let kt = gather_cols_t(kd, n, d, h * dh, dh);
            let vt = gather_cols_t(vd, n, d, h * dh, dh);
            let p = &mut probs[h * n * n..(h + 1) * n * n];
            for i in 0..n {
                let row = &mut p[i * n..(i + 1) * n];
                for kk in 0..dh {
                    axpy(qd[i * d + h * dh + kk] * scale, &kt[kk * n..(kk + 1) * n], row);
                }
                softmax_in_place(row);
                for dd in 0..dh {
                    out[i * d + h * dh + dd] = dot(row, &vt[dd * n..(dd + 1) * n]);
                }
            }
        }
        let t = Tensor::new(vec![n, d], out)?;
        Ok(self.push(t, Op::Attention { q, k, v, heads, probs }, &[q, k, v]))
    }

    /// Mean over rows: `m×n → 1×n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims2(a);
        let mut out = vec![0.0; n];
        for row in self.value(a).data().chunks_exact(n) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let t = Tensor::new(vec![1, n], out).expect("positive width");
        self.push(t, Op::MeanRows(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = sum(self.value(a).data());
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Mean over rows of the per-row L1 distance.
    pub fn l1_mean(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("l1_mean", pred, target)?;
        let (m, _) = self.dims2(pred);
        let total: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(p, t)| (p - t).abs())
            .sum();
        Ok(self.push(
            Tensor::scalar(total / m as f64),
            Op::L1Mean(pred, target),
            &[pred, target],
        ))
    }

    /// Valid-padding 2-D convolution of a `C×H×W` input with `O×C×kh×kw` filters.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || stride == 0 {
            return Err(MetroError::dim("conv2d", &xs, &ws));
        }
        let (c, hh, ww) = (xs[0], xs[1], xs[2]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        if self.value(b).len() != o || kh > hh || kw > ww {
            return Err(MetroError::dim("conv2d", &ws, self.shape(b)));
        }
        let ho = (hh - kh) / stride + 1;
        let wo = (ww - kw) / stride + 1;
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; o * ho * wo];
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bd[oc];
                    for ic in 0..c {
                        for u in 0..kh {
                            let xrow = &xd[(ic * hh + oy * stride + u) * ww + ox * stride..];
                            let wrow = &wd[((oc * c + ic) * kh + u) * kw..];
                            for vv in 0..kw {
                                acc += xrow[vv] * wrow[vv];
                            }
                        }
                    }
                    out[(oc * ho + oy) * wo + ox] = acc;
                }
            }
        }
        let t = Tensor::new(vec![o, ho, wo], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, stride }, &[x, w, b]))
    }

    /// Non-overlapping max pooling (window = stride = `size`) over a `C×H×W` input.
    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || size == 0 || xs[1] < size || xs[2] < size {
            return Err(MetroError::dim("max_pool2d", &xs, &[size]));
        }
        let (c, hh, ww) = (xs[0], xs[1], xs[2]);
        let (ho, wo) = (hh / size, ww / size);
        let xd = self.value(x).data();
        let mut out = vec![0.0; c * ho * wo];
        let mut argmax = vec![0; c * ho * wo];
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for u in 0..size {
                        for v in 0..size {
                            let idx = (ch * hh + oy * size + u) * ww + ox * size + v;
                            if xd[idx] > best || (u == 0 && v == 0) {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (ch * ho + oy) * wo + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let t = Tensor::new(vec![c, ho, wo], out)?;
        Ok(self.push(t, Op::MaxPool2d { x, argmax }, &[x]))
    }

    /// Reverse pass from a scalar node; gradients accumulate over all consumers.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(MetroError::Validation(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                propagate(&self.nodes, &mut self.grads, i, &gout);
            }
            self.grads[i] = Some(gout);
        }
        Ok(())
    }
}

fn gather_cols_t(src: &[f64], n: usize, d: usize, start: usize, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * n];
    for i in 0..n {
        for c in 0..len {
            out[c * n + i] = src[i * d + start + c];
        }
    }
    out
}

fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let val = |v: Var| -> &Tensor { &nodes[v.0].value };
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = dims2(val(*a));
            let (_, n) = dims2(val(*b));
            if let Some(ga) = acc(nodes, grads, *a) {
                gemm_nt(g, val(*b).data(), ga, m, n, k);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                gemm_tn(val(*a).data(), g, gb, m, k, n);
            }
        }
        Op::Transpose(a) => {
            let (m, n) = dims2(val(*a));
            if let Some(ga) = acc(nodes, grads, *a) {
                let gt = transpose(g, n, m);
                ga.iter_mut().zip(gt).for_each(|(x, y)| *x += y);
            }
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(gv) = acc(nodes, grads, v) {
                    gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
        }
        Op::AddBias(a, b) => {
            let n = val(*b).len();
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for row in g.chunks_exact(n) {
                    gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }
        }
        Op::ScaleBy(a, s) => {
            let c = val(*s).data()[0];
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }
            if let Some(gs) = acc(nodes, grads, *s) {
                gs[0] += dot(val(*a).data(), g);
            }
        }
        Op::ConcatCols(parts) => {
            let (m, total) = dims2(&nodes[i].value);
            let mut offset = 0;
            for p in parts {
                let (_, c) = dims2(val(*p));
                if let Some(gp) = acc(nodes, grads, *p) {
                    for r in 0..m {
                        let src = &g[r * total + offset..r * total + offset + c];
                        gp[r * c..(r + 1) * c].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                }
                offset += c;
            }
        }
        Op::SliceRows { src, start } => {
            let (_, n) = dims2(val(*src));
            if let Some(gs) = acc(nodes, grads, *src) {
                gs[start * n..start * n + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(x, y)| *x += y);
            }
        }
        Op::SliceCols { src, start } => {
            let (m, n) = dims2(val(*src));
            let len = g.len() / m;
            if let Some(gs) = acc(nodes, grads, *src) {
                for r in 0..m {
                    gs[r * n + start..r * n + start + len]
                        .iter_mut()
                        .zip(&g[r * len..(r + 1) * len])
                        .for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::BroadcastRows(x) => {
            let d = val(*x).len();
            if let Some(gx) = acc(nodes, grads, *x) {
                for row in g.chunks_exact(d) {
                    gx.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::ReplaceRows { src, token, masked } => {
            let n = val(*token).len();
            if let Some(gs) = acc(nodes, grads, *src) {
                for (r, row) in g.chunks_exact(n).enumerate() {
                    if !masked[r] {
                        gs[r * n..(r + 1) * n].iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            if let Some(gt) = acc(nodes, grads, *token) {
                for (r, row) in g.chunks_exact(n).enumerate() {
                    if masked[r] {
                        gt.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Op::Gelu(x) => {
            let xv = val(*x).data();
            if let Some(gx) = acc(nodes, grads, *x) {
                for ((a, &xi), gi) in gx.iter_mut().zip(xv).zip(g) {
                    *a += gi * gelu_grad(xi);
                }
            }
        }
        Op::Softplus(x) => {
            let xv = val(*x).data();
            if let Some(gx) = acc(nodes, grads, *x) {
                for ((a, &xi), gi) in gx.iter_mut().zip(xv).zip(g) {
                    *a += gi * sigmoid(xi);
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let d = val(*gain).len();
            let gv = val(*gain).data();
            if let Some(gg) = acc(nodes, grads, *gain) {
                for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for j in 0..d {
                        gg[j] += grow[j] * hrow[j];
                    }
                }
            }
            if let Some(gb) = acc(nodes, grads, *bias) {
                for grow in g.chunks_exact(d) {
                    gb.iter_mut().zip(grow).for_each(|(a, b)| *a += b);
                }
            }
            if let Some(gx) = acc(nodes, grads, *x) {
                let inv_d = 1.0 / d as f64;
                for (r, (grow, hrow)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..d {
                        let dh = grow[j] * gv[j];
                        s1 += dh;
                        s2 += dh * hrow[j];
                    }
                    let is = inv_std[r];
                    for j in 0..d {
                        let dh = grow[j] * gv[j];
                        gx[r * d + j] += is * (dh - inv_d * s1 - hrow[j] * inv_d * s2);
                    }
                }
            }
        }
        Op::SoftmaxRows(a) => {
            let (_, n) = dims2(val(*a));
            let y = nodes[i].value.data();
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((grow, yrow), arow) in g.chunks_exact(n).zip(y.chunks_exact(n)).zip(ga.chunks_exact_mut(n)) {
                    let s = dot(grow, yrow);
                    for j in 0..n {
                        arow[j] += yrow[j] * (grow[j] - s);
                    }
                }
            }
        }
        Op::Attention { q, k, v, heads, probs } => attention_backward(nodes, grads, g, *q, *k, *v, *heads, probs),
        Op::MeanRows(a) => {
            let (m, n) = dims2(val(*a));
            if let Some(ga) = acc(nodes, grads, *a) {
                let inv = 1.0 / m as f64;
                for row in ga.chunks_exact_mut(n) {
                    row.iter_mut().zip(g).for_each(|(x, y)| *x += y * inv);
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::L1Mean(p, t) => {
            let (m, _) = dims2(val(*p));
            let scale = g[0] / m as f64;
            let sign = |d: f64| {
                if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            };
            let (pv, tv) = (val(*p).data(), val(*t).data());
            if let Some(gp) = acc(nodes, grads, *p) {
                for ((a, x), y) in gp.iter_mut().zip(pv).zip(tv) {
                    *a += scale * sign(x - y);
                }
            }
            if let Some(gt) = acc(nodes, grads, *t) {
                for ((a, x), y) in gt.iter_mut().zip(pv).zip(tv) {
                    *a -= scale * sign(x - y);
                }
            }
        }
        Op::Conv2d { x, w, b, stride } => {
            let (xs, ws) = (val(*x).shape(), val(*w).shape());
            let (c, hh, ww) = (xs[0], xs[1], xs[2]);
            let (o, kh, kw) = (ws[0], ws[2], ws[3]);
            let os = nodes[i].value.shape();
            let (ho, wo) = (os[1], os[2]);
            let s = *stride;
            if let Some(gb) = acc(nodes, grads, *b) {
                for oc in 0..o {
                    gb[oc] += sum(&g[oc * ho * wo..(oc + 1) * ho * wo]);
                }
            }
            let xd = val(*x).data();
            if let Some(gw) = acc(nodes, grads, *w) {
                for oc in 0..o {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let go = g[(oc * ho + oy) * wo + ox];
                            for ic in 0..c {
                                for u in 0..kh {
                                    let xrow = &xd[(ic * hh + oy * s + u) * ww + ox * s..];
                                    let wrow = &mut gw[((oc * c + ic) * kh + u) * kw..];
                                    for vv in 0..kw {
                                        wrow[vv] += go * xrow[vv];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let wd = val(*w).data();
            if let Some(gx) = acc(nodes, grads, *x) {
                for oc in 0..o {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let go = g[(oc * ho + oy) * wo + ox];
                            for ic in 0..c {
                                for u in 0..kh {
                                    let base = (ic * hh + oy * s + u) * ww + ox * s;
                                    let wrow = &wd[((oc * c + ic) * kh + u) * kw..];
                                    for vv in 0..kw {
                                        gx[base + vv] += go * wrow[vv];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::MaxPool2d { x, argmax } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for (o, &idx) in argmax.iter().enumerate() {
                    gx[idx] += g[o];
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    g: &[f64],
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    probs: &[f64],
) {
    let (n, d) = dims2(&nodes[q.0].value);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd) = (
        nodes[q.0].value.data(),
        nodes[k.0].value.data(),
        nodes[v.0].value.data(),
    );
    let mut gq = vec![0.0; n * d];
    let mut gk = vec![0.0; n * d];
    let mut gv = vec![0.0; n * d];
    let mut dp = vec![0.0; n];
    for h in 0..heads {
        let kt = gather_cols_t(kd, n, d, h * dh, dh);
        let vt = gather_cols_t(vd, n, d, h * dh, dh);
        let p = &probs[h * n * n..(h + 1) * n * n];
        let mut dkt = vec![0.0; dh * n];
        let mut dvt = vec![0.0; dh * n];
        for i in 0..n {
            let prow = &p[i * n..(i + 1) * n];
            let go = &g[i * d + h * dh..i * d + (h + 1) * dh];
            dp.iter_mut().for_each(|x| *x = 0.0);
            for dd in 0..dh {
                axpy(go[dd], prow, &mut dvt[dd * n..(dd + 1) * n]);
                axpy(go[dd], &vt[dd * n..(dd + 1) * n], &mut dp);
            }
            let s = dot(&dp, prow);
            for j in 0..n {
                dp[j] = prow[j] * (dp[j] - s) * scale;
            }
            for kk in 0..dh {
                gq[i * d + h * dh + kk] += dot(&dp, &kt[kk * n..(kk + 1) * n]);
                axpy(qd[i * d + h * dh + kk], &dp, &mut dkt[kk * n..(kk + 1) * n]);
            }
        }
        for j in 0..n {
            for c in 0..dh {
                gk[j * d + h * dh + c] += dkt[c * n + j];
                gv[j * d + h * dh + c] += dvt[c * n + j];
            }
        }
    }
    for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
        if let Some(gx) = acc(nodes, grads, var) {
            gx.iter_mut().zip(buf).for_each(|(a, b)| *a += b);
        }
    }
}
