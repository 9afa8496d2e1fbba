//! Forward kernels shared by the eager API and the autodiff graph.

use crate::error::{Error, Result};

use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Silu,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Sigmoid => x.map(sigmoid),
        Activation::Silu => x.map(silu),
    }
}

/// `x W (+ b)` for `x: [*, in]`, `W: [in, out]`, `b: [out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let x2 = x.clone().reshape(vec![x.rows(), x.cols()])?;
    let mut y = x2.matmul(w)?;
    if let Some(b) = b {
        if b.numel() != y.cols() {
            return Err(Error::dim("linear", format!("bias {:?} vs out {}", b.shape(), y.cols())));
        }
        add_row_in_place(&mut y, b.data());
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = y.cols();
    y.reshape(shape)
}

pub(crate) fn add_row_in_place(y: &mut Tensor, b: &[f64]) {
    for i in 0..y.rows() {
        for (v, bv) in y.row_mut(i).iter_mut().zip(b) {
            *v += bv;
        }
    }
}

/// Per-row normalization statistics kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn layer_norm_with_stats(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormStats)> {
    let d = x.cols();
    if gamma.numel() != d || beta.numel() != d {
        return Err(Error::dim("layer_norm", format!("width {d} vs gamma {:?}", gamma.shape())));
    }
    let mut out = x.clone();
    let mut stats = LayerNormStats { mean: Vec::with_capacity(x.rows()), rstd: Vec::with_capacity(x.rows()) };
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for ((v, g), b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = (*v - mean) * rstd * g + b;
        }
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    Ok((out, stats))
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_with_stats(x, gamma, beta, eps).map(|(y, _)| y)
}

/// Row-wise softmax restricted to entries where `mask` is true; masked entries are exactly 0.
pub fn masked_softmax(logits: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let k = logits.cols();
    if mask.len() != k {
        return Err(Error::dim("masked_softmax", format!("mask {} vs width {k}", mask.len())));
    }
    if logits.rows() > 0 && !mask.iter().any(|&m| m) {
        return Err(Error::AllMasked { row: 0 });
    }
    let mut out = Tensor::zeros(logits.shape());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let max = row
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let o = out.row_mut(i);
        let mut total = 0.0;
        for j in 0..k {
            if mask[j] {
                o[j] = (row[j] - max).exp();
                total += o[j];
            }
        }
        for v in o.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

/// Causal depthwise convolution over time: `x: [T, d]`, `kernels: [k, d]`.
pub fn depthwise_causal_conv1d(x: &Tensor, kernels: &Tensor) -> Result<Tensor> {
    let (t_len, d) = (x.rows(), x.cols());
    let k = kernels.rows();
    if kernels.cols() != d || k == 0 {
        return Err(Error::dim("conv1d", format!("x {:?} kernels {:?}", x.shape(), kernels.shape())));
    }
    let mut out = Tensor::zeros(&[t_len, d]);
    for t in 0..t_len {
        for j in 0..k {
            // input index t - (k - 1) + j
            let Some(src) = (t + j + 1).checked_sub(k) else { continue };
            let xr = x.row(src);
            let kr = kernels.row(j);
            let o = out.row_mut(t);
            for c in 0..d {
                o[c] += kr[c] * xr[c];
            }
        }
    }
    Ok(out)
}
