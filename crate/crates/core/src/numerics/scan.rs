//! Diagonal selective state-space scan.
//!
//! For channel `c` and state `j`:
//!
//! ```text
//! h[t,c,j] = exp(delta[t,c] * a[j]) * h[t-1,c,j] + delta[t,c] * b[t,j] * u[t,c]
//! y[t,c]   = sum_j cm[t,j] * h[t,c,j] + skip[c] * u[t,c]
//! ```
//!
//! with `a[j] = -exp(a_log[j])` and `h[-1] = 0`.

use rayon::prelude::*;

use crate::error::{Error, Result};

use super::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct ScanInputs<'a> {
    /// `[T, d]`
    pub u: &'a Tensor,
    /// `[T, d]`, positive step sizes
    pub delta: &'a Tensor,
    /// `[T, s]`
    pub b: &'a Tensor,
    /// `[T, s]`
    pub c: &'a Tensor,
    /// `[s]`
    pub a_log: &'a Tensor,
    /// `[d]`
    pub skip: &'a Tensor,
}

impl ScanInputs<'_> {
    fn dims(&self) -> Result<(usize, usize, usize)> {
        let (t, d) = (self.u.rows(), self.u.cols());
        let s = self.a_log.numel();
        let ok = self.delta.shape() == self.u.shape()
            && self.b.rows() == t
            && self.b.cols() == s
            && self.c.rows() == t
            && self.c.cols() == s
            && self.skip.numel() == d
            && s > 0;
        if !ok {
            return Err(Error::dim(
                "selective_scan",
                format!(
                    "u {:?} delta {:?} b {:?} c {:?} a_log {:?} skip {:?}",
                    self.u.shape(),
                    self.delta.shape(),
                    self.b.shape(),
                    self.c.shape(),
                    self.a_log.shape(),
                    self.skip.shape()
                ),
            ));
        }
        Ok((t, d, s))
    }

    fn decay_rates(&self) -> Vec<f64> {
        self.a_log.data().iter().map(|v| -v.exp()).collect()
    }
}

/// Scan output plus every hidden state, laid out `[T, d, s]`.
#[derive(Clone, Debug)]
pub struct ScanOutput {
    pub y: Tensor,
    pub states: Vec<f64>,
}

pub struct ScanGrads {
    pub u: Tensor,
    pub delta: Tensor,
    pub b: Tensor,
    pub c: Tensor,
    pub a_log: Tensor,
    pub skip: Tensor,
}

fn readout(inp: &ScanInputs<'_>, states: &[f64], t_len: usize, d: usize, s: usize) -> Tensor {
    let mut y = Tensor::zeros(&[t_len, d]);
    for t in 0..t_len {
        let cm = inp.c.row(t);
        let u = inp.u.row(t);
        let yr = y.row_mut(t);
        for ch in 0..d {
            let h = &states[(t * d + ch) * s..(t * d + ch + 1) * s];
            let dot: f64 = h.iter().zip(cm).map(|(h, c)| h * c).sum();
            yr[ch] = dot + inp.skip.data()[ch] * u[ch];
        }
    }
    y
}

/// Step-by-step recurrence.
pub fn selective_scan(inp: &ScanInputs<'_>) -> Result<ScanOutput> {
    let (t_len, d, s) = inp.dims()?;
    let a = inp.decay_rates();
    let mut states = vec![0.0; t_len * d * s];
    for t in 0..t_len {
        let (prev, cur) = states.split_at_mut(t * d * s);
        let cur = &mut cur[..d * s];
        let prev = if t == 0 { None } else { Some(&prev[(t - 1) * d * s..]) };
        let u = inp.u.row(t);
        let dt = inp.delta.row(t);
        let b = inp.b.row(t);
        for ch in 0..d {
            for j in 0..s {
                let carry = prev.map_or(0.0, |p| (dt[ch] * a[j]).exp() * p[ch * s + j]);
                cur[ch * s + j] = carry + dt[ch] * b[j] * u[ch];
            }
        }
    }
    let y = readout(inp, &states, t_len, d, s);
    Ok(ScanOutput { y, states })
}

/// Two-pass chunked scan: chunks run their local recurrence from a zero state in
/// parallel, then the carried state is folded in with the cumulative decay.
pub fn selective_scan_chunked(inp: &ScanInputs<'_>, chunk: usize) -> Result<ScanOutput> {
    let (t_len, d, s) = inp.dims()?;
    if chunk == 0 {
        return Err(Error::Config("scan chunk size must be positive".into()));
    }
    let a = inp.decay_rates();
    let starts: Vec<usize> = (0..t_len).step_by(chunk).collect();

    // (local states, cumulative decay) per chunk
    let locals: Vec<(Vec<f64>, Vec<f64>)> = starts
        .par_iter()
        .map(|&t0| {
            let t1 = (t0 + chunk).min(t_len);
            let n = t1 - t0;
            let mut local = vec![0.0; n * d * s];
            let mut cum = vec![0.0; n * d * s];
            for (k, t) in (t0..t1).enumerate() {
                let u = inp.u.row(t);
                let dt = inp.delta.row(t);
                let b = inp.b.row(t);
                for ch in 0..d {
                    for j in 0..s {
                        let idx = (k * d + ch) * s + j;
                        let decay = (dt[ch] * a[j]).exp();
                        let (lprev, cprev) = if k == 0 {
                            (0.0, 1.0)
                        } else {
                            let p = ((k - 1) * d + ch) * s + j;
                            (local[p], cum[p])
                        };
                        local[idx] = decay * lprev + dt[ch] * b[j] * u[ch];
                        cum[idx] = decay * cprev;
                    }
                }
            }
            (local, cum)
        })
        .collect();

    let mut states = vec![0.0; t_len * d * s];
    let mut carry = vec![0.0; d * s];
    for (&t0, (local, cum)) in starts.iter().zip(&locals) {
        let n = local.len() / (d * s);
        for k in 0..n {
            let base = k * d * s;
            let out = &mut states[(t0 + k) * d * s..(t0 + k + 1) * d * s];
            for i in 0..d * s {
                out[i] = local[base + i] + cum[base + i] * carry[i];
            }
        }
        carry.copy_from_slice(&states[(t0 + n - 1) * d * s..(t0 + n) * d * s]);
    }
    let y = readout(inp, &states, t_len, d, s);
    Ok(ScanOutput { y, states })
}

pub fn selective_scan_backward(inp: &ScanInputs<'_>, states: &[f64], gy: &Tensor) -> Result<ScanGrads> {
    let (t_len, d, s) = inp.dims()?;
    let a = inp.decay_rates();
    let mut gu = Tensor::zeros(&[t_len, d]);
    let mut gdelta = Tensor::zeros(&[t_len, d]);
    let mut gb = Tensor::zeros(&[t_len, s]);
    let mut gc = Tensor::zeros(&[t_len, s]);
    let mut ga = vec![0.0; s];
    let mut gskip = vec![0.0; d];
    let mut carry = vec![0.0; d * s];

    for t in (0..t_len).rev() {
        let u = inp.u.row(t);
        let dt = inp.delta.row(t);
        let b = inp.b.row(t);
        let cm = inp.c.row(t);
        let g = gy.row(t);
        let h = &states[t * d * s..(t + 1) * d * s];
        let h_prev = if t == 0 { None } else { Some(&states[(t - 1) * d * s..t * d * s]) };
        for ch in 0..d {
            gskip[ch] += g[ch] * u[ch];
            gu.row_mut(t)[ch] += g[ch] * inp.skip.data()[ch];
            for j in 0..s {
                let idx = ch * s + j;
                gc.row_mut(t)[j] += g[ch] * h[idx];
                let gh = g[ch] * cm[j] + carry[idx];
                let decay = (dt[ch] * a[j]).exp();
                if let Some(hp) = h_prev {
                    let gdecay = gh * hp[idx] * decay;
                    gdelta.row_mut(t)[ch] += gdecay * a[j];
                    ga[j] += gdecay * dt[ch];
                }
                gdelta.row_mut(t)[ch] += gh * b[j] * u[ch];
                gb.row_mut(t)[j] += gh * dt[ch] * u[ch];
                gu.row_mut(t)[ch] += gh * dt[ch] * b[j];
                carry[idx] = gh * decay;
            }
        }
    }
    // a = -exp(a_log) so da/da_log = a
    let ga_log: Vec<f64> = ga.iter().zip(&a).map(|(g, a)| g * a).collect();
    Ok(ScanGrads {
        u: gu,
        delta: gdelta,
        b: gb,
        c: gc,
        a_log: Tensor::new(inp.a_log.shape().to_vec(), ga_log)?,
        skip: Tensor::new(inp.skip.shape().to_vec(), gskip)?,
    })
}
