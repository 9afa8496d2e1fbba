//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order for the backward pass.

use std::sync::Arc;

use crate::error::{Error, Result};

use super::kernels::{self, LayerNormStats};
use super::scan::{self, ScanInputs};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    RowScale(Var, Arc<[f64]>),
    Scale(Var, f64),
    Sigmoid(Var),
    Silu(Var),
    Softplus(Var),
    Transpose(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: LayerNormStats },
    MaskedSoftmax(Var, Arc<[bool]>),
    Conv(Var, Var),
    Scan { u: Var, delta: Var, b: Var, c: Var, a_log: Var, skip: Var, states: Vec<f64> },
    CosineRows(Var, Var),
    GatherRow(Var, usize),
    WeightedCe { logits: Var, label: usize, weight: f64 },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Selects the sequential or chunked scan for the forward value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScanMode {
    #[default]
    Sequential,
    Chunked(usize),
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    scan_mode: ScanMode,
}

/// Gradients indexed by tape position.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_scan_mode(scan_mode: ScanMode) -> Self {
        Self { nodes: Vec::new(), scan_mode }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value: Arc::new(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf sharing storage with the caller.
    pub fn param(&mut self, value: Arc<Tensor>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value: Arc::new(value), op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).matmul(self.value(b))?;
        Ok(self.push(y, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(y, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(y, Op::Mul(a, b), &[a, b]))
    }

    /// `x[m, n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.numel() != xv.cols() {
            return Err(Error::dim("add_row", format!("{:?} + {:?}", xv.shape(), bv.shape())));
        }
        let mut y = xv.clone();
        kernels::add_row_in_place(&mut y, bv.data());
        Ok(self.push(y, Op::AddRow(x, b), &[x, b]))
    }

    /// Multiplies row `i` by the constant `scale[i]`.
    pub fn row_scale(&mut self, x: Var, scale: Arc<[f64]>) -> Result<Var> {
        let xv = self.value(x);
        if scale.len() != xv.rows() {
            return Err(Error::dim("row_scale", format!("{} scales for {} rows", scale.len(), xv.rows())));
        }
        let mut y = xv.clone();
        for (i, &s) in scale.iter().enumerate() {
            y.row_mut(i).iter_mut().for_each(|v| *v *= s);
        }
        Ok(self.push(y, Op::RowScale(x, scale), &[x]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let y = self.value(x).map(|v| v * s);
        self.push(y, Op::Scale(x, s), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(kernels::sigmoid);
        self.push(y, Op::Sigmoid(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(kernels::silu);
        self.push(y, Op::Silu(x), &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let y = self.value(x).map(kernels::softplus);
        self.push(y, Op::Softplus(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let y = self.value(x).transpose();
        self.push(y, Op::Transpose(x), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = self.value(x).slice_cols(start, len)?;
        Ok(self.push(y, Op::SliceCols(x, start), &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut y = Tensor::zeros(&[rows, total]);
        let mut offset = 0;
        for p in parts {
            let pv = self.value(*p);
            if pv.rows() != rows {
                return Err(Error::dim("concat_cols", format!("{} rows vs {rows}", pv.rows())));
            }
            for i in 0..rows {
                y.row_mut(i)[offset..offset + pv.cols()].copy_from_slice(pv.row(i));
            }
            offset += pv.cols();
        }
        Ok(self.push(y, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (y, stats) =
            kernels::layer_norm_with_stats(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(y, Op::LayerNorm { x, gamma, beta, stats }, &[x, gamma, beta]))
    }

    pub fn masked_softmax(&mut self, x: Var, mask: Arc<[bool]>) -> Result<Var> {
        let y = kernels::masked_softmax(self.value(x), &mask)?;
        Ok(self.push(y, Op::MaskedSoftmax(x, mask), &[x]))
    }

    pub fn conv1d(&mut self, x: Var, kernels: Var) -> Result<Var> {
        let y = kernels::depthwise_causal_conv1d(self.value(x), self.value(kernels))?;
        Ok(self.push(y, Op::Conv(x, kernels), &[x, kernels]))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(&mut self, u: Var, delta: Var, b: Var, c: Var, a_log: Var, skip: Var) -> Result<Var> {
        let inp = ScanInputs {
            u: self.value(u),
            delta: self.value(delta),
            b: self.value(b),
            c: self.value(c),
            a_log: self.value(a_log),
            skip: self.value(skip),
        };
        let out = match self.scan_mode {
            ScanMode::Sequential => scan::selective_scan(&inp)?,
            ScanMode::Chunked(n) => scan::selective_scan_chunked(&inp, n)?,
        };
        Ok(self.push(
            out.y,
            Op::Scan { u, delta, b, c, a_log, skip, states: out.states },
            &[u, delta, b, c, a_log, skip],
        ))
    }

    /// Cosine similarity of every row of `a: [n, d]` with `b: [1, d]`, as `[n, 1]`.
    /// A zero-norm operand gives a score of 0.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rows() != 1 || av.cols() != bv.cols() {
            return Err(Error::dim("cosine_rows", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let bn = norm(bv.row(0));
        let mut y = Tensor::zeros(&[av.rows(), 1]);
        for i in 0..av.rows() {
            let an = norm(av.row(i));
            if an > 0.0 && bn > 0.0 {
                y.data_mut()[i] = dot(av.row(i), bv.row(0)) / (an * bn);
            }
        }
        Ok(self.push(y, Op::CosineRows(a, b), &[a, b]))
    }

    /// Row `index` of `table`, as `[1, cols]`.
    pub fn gather_row(&mut self, table: Var, index: usize) -> Result<Var> {
        let tv = self.value(table);
        if index >= tv.rows() {
            return Err(Error::dim("gather_row", format!("row {index} of {}", tv.rows())));
        }
        let y = Tensor::new(vec![1, tv.cols()], tv.row(index).to_vec())?;
        Ok(self.push(y, Op::GatherRow(table, index), &[table]))
    }

    /// `weight * (logsumexp(logits) - logits[label])` for a single `[1, k]` row.
    pub fn weighted_cross_entropy(&mut self, logits: Var, label: usize, weight: f64) -> Result<Var> {
        let lv = self.value(logits);
        if label >= lv.cols() || lv.rows() != 1 {
            return Err(Error::dim("cross_entropy", format!("label {label} for {:?}", lv.shape())));
        }
        let loss = weight * (log_sum_exp(lv.row(0)) - lv.row(0)[label]);
        Ok(self.push(Tensor::scalar(loss), Op::WeightedCe { logits, label, weight }, &[logits]))
    }

    /// Backpropagates from a single-element output.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::dim("backward", format!("root shape {:?}", self.value(root).shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &*node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let ga = g.matmul(&self.value(*b).transpose())?;
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = self.value(*a).transpose().matmul(g)?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let ga = g.zip_map(self.value(*b), "mul", |g, b| g * b)?;
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = g.zip_map(self.value(*a), "mul", |g, a| g * a)?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*b) {
                    let mut gb = vec![0.0; g.cols()];
                    for i in 0..g.rows() {
                        for (acc, v) in gb.iter_mut().zip(g.row(i)) {
                            *acc += v;
                        }
                    }
                    let gb = Tensor::new(self.value(*b).shape().to_vec(), gb)?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::RowScale(x, scale) => {
                let mut gx = g.clone();
                for (i, &s) in scale.iter().enumerate() {
                    gx.row_mut(i).iter_mut().for_each(|v| *v *= s);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.map(|v| v * s)),
            Op::Sigmoid(x) => {
                let gx = g.zip_map(y, "sigmoid", |g, y| g * y * (1.0 - y))?;
                self.accumulate(grads, *x, gx);
            }
            Op::Silu(x) => {
                let gx = g.zip_map(self.value(*x), "silu", |g, x| g * kernels::silu_grad(x))?;
                self.accumulate(grads, *x, gx);
            }
            Op::Softplus(x) => {
                let gx = g.zip_map(self.value(*x), "softplus", |g, x| g * kernels::sigmoid(x))?;
                self.accumulate(grads, *x, gx);
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose()),
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.shape());
                for i in 0..g.rows() {
                    gx.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.wants(*p) {
                        self.accumulate(grads, *p, g.slice_cols(offset, w)?);
                    }
                    offset += w;
                }
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                self.layer_norm_backward(*x, *gamma, *beta, stats, g, grads)?;
            }
            Op::MaskedSoftmax(x, mask) => {
                let mut gx = Tensor::zeros(y.shape());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let inner: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    let out = gx.row_mut(i);
                    for j in 0..yr.len() {
                        if mask[j] {
                            out[j] = yr[j] * (gr[j] - inner);
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Conv(x, k) => {
                let (xv, kv) = (self.value(*x), self.value(*k));
                let (t_len, d, kw) = (xv.rows(), xv.cols(), kv.rows());
                let mut gx = Tensor::zeros(xv.shape());
                let mut gk = Tensor::zeros(kv.shape());
                for t in 0..t_len {
                    for j in 0..kw {
                        let Some(src) = (t + j + 1).checked_sub(kw) else { continue };
                        for c in 0..d {
                            let gv = g.get2(t, c);
                            gx.row_mut(src)[c] += kv.get2(j, c) * gv;
                            gk.row_mut(j)[c] += xv.get2(src, c) * gv;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *k, gk);
            }
            Op::Scan { u, delta, b, c, a_log, skip, states } => {
                let inp = ScanInputs {
                    u: self.value(*u),
                    delta: self.value(*delta),
                    b: self.value(*b),
                    c: self.value(*c),
                    a_log: self.value(*a_log),
                    skip: self.value(*skip),
                };
                let sg = scan::selective_scan_backward(&inp, states, g)?;
                self.accumulate(grads, *u, sg.u);
                self.accumulate(grads, *delta, sg.delta);
                self.accumulate(grads, *b, sg.b);
                self.accumulate(grads, *c, sg.c);
                self.accumulate(grads, *a_log, sg.a_log);
                self.accumulate(grads, *skip, sg.skip);
            }
            Op::CosineRows(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let brow = bv.row(0);
                let bn = norm(brow);
                let mut ga = Tensor::zeros(av.shape());
                let mut gb = vec![0.0; bv.cols()];
                for i in 0..av.rows() {
                    let arow = av.row(i);
                    let an = norm(arow);
                    if an == 0.0 || bn == 0.0 {
                        continue;
                    }
                    let cos = y.data()[i];
                    let gi = g.data()[i];
                    let inv = 1.0 / (an * bn);
                    let gar = ga.row_mut(i);
                    for k in 0..arow.len() {
                        gar[k] = gi * (brow[k] * inv - cos * arow[k] / (an * an));
                        gb[k] += gi * (arow[k] * inv - cos * brow[k] / (bn * bn));
                    }
                }
                self.accumulate(grads, *a, ga);
                if self.wants(*b) {
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), gb)?);
                }
            }
            Op::GatherRow(table, index) => {
                if self.wants(*table) {
                    let mut gt = Tensor::zeros(self.value(*table).shape());
                    gt.row_mut(*index).copy_from_slice(g.row(0));
                    self.accumulate(grads, *table, gt);
                }
            }
            Op::WeightedCe { logits, label, weight } => {
                let lv = self.value(*logits);
                let row = lv.row(0);
                let lse = log_sum_exp(row);
                let scale = g.data()[0] * weight;
                let gl: Vec<f64> = row
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| scale * ((v - lse).exp() - if j == *label { 1.0 } else { 0.0 }))
                    .collect();
                self.accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), gl)?);
            }
        }
        Ok(())
    }

    fn layer_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &LayerNormStats,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let xv = self.value(x);
        let gam = self.value(gamma).data();
        let d = xv.cols();
        let mut gx = Tensor::zeros(xv.shape());
        let mut gg = vec![0.0; d];
        let mut gbeta = vec![0.0; d];
        let mut xhat = vec![0.0; d];
        let mut gxhat = vec![0.0; d];
        for i in 0..xv.rows() {
            let (mean, rstd) = (stats.mean[i], stats.rstd[i]);
            let (xr, gr) = (xv.row(i), g.row(i));
            for k in 0..d {
                xhat[k] = (xr[k] - mean) * rstd;
                gxhat[k] = gr[k] * gam[k];
                gg[k] += gr[k] * xhat[k];
                gbeta[k] += gr[k];
            }
            let m1 = gxhat.iter().sum::<f64>() / d as f64;
            let m2 = gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            let out = gx.row_mut(i);
            for k in 0..d {
                out[k] = rstd * (gxhat[k] - m1 - xhat[k] * m2);
            }
        }
        self.accumulate(grads, x, gx);
        if self.wants(gamma) {
            self.accumulate(grads, gamma, Tensor::new(self.value(gamma).shape().to_vec(), gg)?);
        }
        if self.wants(beta) {
            self.accumulate(grads, beta, Tensor::new(self.value(beta).shape().to_vec(), gbeta)?);
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
