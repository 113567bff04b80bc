//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes that do not
//! depend on a trainable leaf are marked as not needing gradients, so frozen
//! sub-networks cost nothing in the backward sweep.

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Silu(Var),
    Sigmoid(Var),
    /// Output holds the normalized values; `rstd` is kept per row.
    LayerNorm { x: Var, rstd: Vec<f64> },
    Softmax(Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    BroadcastRows(Var),
    DepthwiseConv { x: Var, w: Var },
    Glu(Var),
    MeanSquare(Var),
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

pub struct Graph {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf that receives a gradient (used by tests and grad checks).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter as a leaf; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId, trainable: bool) -> Var {
        if self.param_vars.len() < store.len() {
            self.param_vars.resize(store.len(), None);
        }
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, trainable);
        self.nodes[v.0].param = Some(id);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, _) = self.shape(a);
        let (_, n) = self.shape(b);
        let mut out = Tensor::zeros(m, n);
        gemm(self.value(a), false, self.value(b), false, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, _) = self.shape(a);
        let (n, _) = self.shape(b);
        let mut out = Tensor::zeros(m, n);
        gemm(self.value(a), false, self.value(b), true, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulNT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// `a[m×n] + row[1×n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a row vector");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width mismatch");
        let r = r.data().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "mul_row expects a row vector");
        assert_eq!(r.cols(), self.value(a).cols(), "mul_row width mismatch");
        let r = r.data().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o *= b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(out, Op::AddConst(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(out, Op::Silu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut out = Tensor::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in out.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        let ng = self.ng(x);
        self.push(out, Op::LayerNorm { x, rstd }, ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_rows(start, len);
        let ng = self.ng(x);
        self.push(out, Op::SliceRows { x, start }, ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_cols(start, len);
        let ng = self.ng(x);
        self.push(out, Op::SliceCols { x, start }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&vals);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&vals);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Repeats a `[1×n]` row `rows` times.
    pub fn broadcast_rows(&mut self, row: Var, rows: usize) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "broadcast_rows expects a row vector");
        let mut data = Vec::with_capacity(rows * r.cols());
        for _ in 0..rows {
            data.extend_from_slice(r.data());
        }
        let out = Tensor::from_vec(rows, r.cols(), data);
        let ng = self.ng(row);
        self.push(out, Op::BroadcastRows(row), ng)
    }

    /// Per-channel convolution along time with zero "same" padding.
    /// `w` is `[kernel × channels]`; the kernel length must be odd.
    pub fn depthwise_conv(&mut self, x: Var, w: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (t_len, ch) = xv.shape();
        let k = wv.rows();
        assert_eq!(wv.cols(), ch, "depthwise kernel width mismatch");
        assert!(k % 2 == 1, "depthwise kernel must be odd");
        let pad = (k / 2) as isize;
        let mut out = Tensor::zeros(t_len, ch);
        for t in 0..t_len {
            let orow = &mut out.data_mut()[t * ch..(t + 1) * ch];
            for j in 0..k {
                let src = t as isize + j as isize - pad;
                if src < 0 || src >= t_len as isize {
                    continue;
                }
                let xr = xv.row(src as usize);
                let wr = wv.row(j);
                for c in 0..ch {
                    orow[c] += wr[c] * xr[c];
                }
            }
        }
        let ng = self.ng(x) || self.ng(w);
        self.push(out, Op::DepthwiseConv { x, w }, ng)
    }

    /// Gated linear unit over the channel axis: `a ⊙ σ(b)` for `[a | b]`.
    pub fn glu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        assert!(cols % 2 == 0, "glu needs an even channel count");
        let half = cols / 2;
        let mut out = Tensor::zeros(rows, half);
        for r in 0..rows {
            let row = xv.row(r);
            for c in 0..half {
                out.set(r, c, row[c] * sigmoid(row[half + c]));
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Glu(x), ng)
    }

    pub fn mean_square(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = v.len().max(1) as f64;
        let s = v.data().iter().map(|x| x * x).sum::<f64>() / n;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::MeanSquare(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage(
                "backward called on a value not recorded in this graph".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }

        let mut params = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(id), true) = (node.param, node.needs_grad) {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.rows(), node.value.cols()));
                params.push((id, g));
            }
        }
        Ok(Gradients { all: grads, params })
    }

    fn propagate(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    let mut da = Tensor::zeros(val(*a).rows(), val(*a).cols());
                    gemm(dy, false, val(*b), true, &mut da, 0.0);
                    accumulate(grads, *a, da);
                }
                if self.ng(*b) {
                    let mut db = Tensor::zeros(val(*b).rows(), val(*b).cols());
                    gemm(val(*a), true, dy, false, &mut db, 0.0);
                    accumulate(grads, *b, db);
                }
            }
            Op::MatMulNT(a, b) => {
                if self.ng(*a) {
                    let mut da = Tensor::zeros(val(*a).rows(), val(*a).cols());
                    gemm(dy, false, val(*b), false, &mut da, 0.0);
                    accumulate(grads, *a, da);
                }
                if self.ng(*b) {
                    let mut db = Tensor::zeros(val(*b).rows(), val(*b).cols());
                    gemm(dy, true, val(*a), false, &mut db, 0.0);
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, dy.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, dy.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, dy.zip_map(val(*b), |g, y| g * y));
                }
                if self.ng(*b) {
                    accumulate(grads, *b, dy.zip_map(val(*a), |g, x| g * x));
                }
            }
            Op::AddRow(a, row) => {
                if self.ng(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if self.ng(*row) {
                    accumulate(grads, *row, column_sums(dy));
                }
            }
            Op::MulRow(a, row) => {
                let r = val(*row);
                if self.ng(*a) {
                    let mut da = dy.clone();
                    for i in 0..da.rows() {
                        for (g, s) in da.row_mut(i).iter_mut().zip(r.data()) {
                            *g *= s;
                        }
                    }
                    accumulate(grads, *a, da);
                }
                if self.ng(*row) {
                    let prod = dy.zip_map(val(*a), |g, x| g * x);
                    accumulate(grads, *row, column_sums(&prod));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                accumulate(grads, *a, dy.map(|g| g * s));
            }
            Op::AddConst(a) => accumulate(grads, *a, dy.clone()),
            Op::Silu(a) => {
                let d = dy.zip_map(val(*a), |g, x| {
                    let s = sigmoid(x);
                    g * (s + x * s * (1.0 - s))
                });
                accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = dy.zip_map(&node.value, |g, y| g * y * (1.0 - y));
                accumulate(grads, *a, d);
            }
            Op::LayerNorm { x, rstd } => {
                let y = &node.value;
                let cols = y.cols() as f64;
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let g = dy.row(r);
                    let yr = y.row(r);
                    let mean_g = g.iter().sum::<f64>() / cols;
                    let mean_gy = g.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols;
                    for ((o, gi), yi) in dx.row_mut(r).iter_mut().zip(g).zip(yr) {
                        *o = rstd[r] * (gi - mean_g - yi * mean_gy);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let g = dy.row(r);
                    let yr = y.row(r);
                    let dot = g.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>();
                    for ((o, gi), yi) in dx.row_mut(r).iter_mut().zip(g).zip(yr) {
                        *o = yi * (gi - dot);
                    }
                }
                accumulate(grads, *a, dx);
            }
            Op::SliceRows { x, start } => {
                let xv = val(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                let c = xv.cols();
                dx.data_mut()[start * c..start * c + dy.len()].copy_from_slice(dy.data());
                accumulate(grads, *x, dx);
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..dy.rows() {
                    dx.row_mut(r)[*start..*start + dy.cols()].copy_from_slice(dy.row(r));
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = val(p).rows();
                    if self.ng(p) {
                        accumulate(grads, p, dy.slice_rows(offset, rows));
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = val(p).cols();
                    if self.ng(p) {
                        accumulate(grads, p, dy.slice_cols(offset, cols));
                    }
                    offset += cols;
                }
            }
            Op::BroadcastRows(row) => accumulate(grads, *row, column_sums(dy)),
            Op::DepthwiseConv { x, w } => {
                let xv = val(*x);
                let wv = val(*w);
                let (t_len, ch) = xv.shape();
                let k = wv.rows();
                let pad = (k / 2) as isize;
                let mut dx = Tensor::zeros(t_len, ch);
                let mut dw = Tensor::zeros(k, ch);
                for t in 0..t_len {
                    let g = dy.row(t);
                    for j in 0..k {
                        let src = t as isize + j as isize - pad;
                        if src < 0 || src >= t_len as isize {
                            continue;
                        }
                        let src = src as usize;
                        for c in 0..ch {
                            dx.data_mut()[src * ch + c] += wv.get(j, c) * g[c];
                            dw.data_mut()[j * ch + c] += xv.get(src, c) * g[c];
                        }
                    }
                }
                if self.ng(*x) {
                    accumulate(grads, *x, dx);
                }
                if self.ng(*w) {
                    accumulate(grads, *w, dw);
                }
            }
            Op::Glu(x) => {
                let xv = val(*x);
                let half = xv.cols() / 2;
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let row = xv.row(r);
                    let g = dy.row(r);
                    let out = dx.row_mut(r);
                    for c in 0..half {
                        let s = sigmoid(row[half + c]);
                        out[c] = g[c] * s;
                        out[half + c] = g[c] * row[c] * s * (1.0 - s);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::MeanSquare(a) => {
                let g = dy.item();
                let n = val(*a).len().max(1) as f64;
                accumulate(grads, *a, val(*a).map(|x| 2.0 * x * g / n));
            }
            Op::Sum(a) => {
                let g = dy.item();
                let a_val = val(*a);
                accumulate(grads, *a, Tensor::filled(a_val.rows(), a_val.cols(), g));
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    all: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    /// Gradient with respect to any recorded node that needed one.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.all.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every trainable parameter bound in the graph.
    pub fn params(&self) -> &[(ParamId, Tensor)] {
        &self.params
    }

    pub fn into_params(self) -> Vec<(ParamId, Tensor)> {
        self.params
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn column_sums(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, t.cols());
    for r in 0..t.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(t.row(r)) {
            *o += v;
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
