//! Finite-difference verification of the full model gradient.

use serde::{Deserialize, Serialize};

use crate::data::{make_batch, random_record_sized, Batch};
use crate::error::{Error, Result};
use crate::numerics::{grad_check, sigmoid, GradCheckReport, ParamStore, Rng, Tensor};

use super::config::ModelConfig;
use super::forward::{forward, loss_and_grads};
use super::params::init_parameters;

/// Largest model width the checker accepts.
pub const GRAD_CHECK_MAX_D: usize = 16;
/// Largest fixture text length the checker accepts.
pub const GRAD_CHECK_MAX_LEN: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckOptions {
    pub delta: f64,
    pub tol: f64,
    pub batch_size: usize,
    pub max_text_len: usize,
    pub data_seed: u64,
    /// Test fixture: perturbs the analytic gradient of this parameter.
    #[serde(skip)]
    pub corrupt: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { delta: 1e-4, tol: 1e-4, batch_size: 3, max_text_len: 6, data_seed: 7, corrupt: None }
    }
}

/// Random padded batch for the checker. Record `i` has `n_max - i` images and
/// `max_text_len - i` tokens (both at least 1); the first record has OCR text
/// on every image so the OCR attention sees more than one key.
pub fn gradient_fixture(cfg: &ModelConfig, opts: &GradCheckOptions) -> Result<Batch> {
    let mut rng = Rng::new(opts.data_seed);
    let records: Vec<_> = (0..opts.batch_size)
        .map(|i| {
            let n = cfg.n_max.saturating_sub(i).max(1);
            let len = opts.max_text_len.saturating_sub(i).max(1);
            let mut r = random_record_sized(&mut rng, format!("check-{i}"), cfg.d, len, n);
            if i == 0 {
                for j in 0..n {
                    if !r.ocr_present[j] {
                        r.ocr_present[j] = true;
                        r.ocr.row_mut(j).iter_mut().for_each(|v| *v = rng.normal());
                    }
                }
            }
            r
        })
        .collect();
    make_batch(&records, cfg.n_max)
}

/// Mean weighted cross-entropy minus its value at the logits `base`.
///
/// With two classes the per-sample loss is `softplus(x)` for the logit margin
/// `x = z[1-y] - z[y]`, and `softplus(x) - softplus(x0) = ln1p(sigmoid(x0) * expm1(x - x0))`
/// is free of the cancellation that dominates finite differences of the raw loss.
pub fn shifted_loss(batch: &Batch, logits: &Tensor, base: &Tensor, class_weights: [f64; 2]) -> f64 {
    let total: f64 = (0..batch.len())
        .map(|b| {
            let y = usize::from(batch.label[b]);
            let x = logits.get2(b, 1 - y) - logits.get2(b, y);
            let x0 = base.get2(b, 1 - y) - base.get2(b, y);
            class_weights[y] * (sigmoid(x0) * (x - x0).exp_m1()).ln_1p()
        })
        .sum();
    total / batch.len() as f64
}

/// Compares the tape gradient of the weighted loss with central differences
/// for every scalar of every parameter, at the initialization of `cfg`.
pub fn check_model_gradients(cfg: &ModelConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    cfg.validate()?;
    if cfg.d > GRAD_CHECK_MAX_D || opts.max_text_len > GRAD_CHECK_MAX_LEN {
        return Err(Error::Config(format!(
            "gradient check needs d <= {GRAD_CHECK_MAX_D} and L <= {GRAD_CHECK_MAX_LEN}, got d={} L={}",
            cfg.d, opts.max_text_len
        )));
    }
    if opts.batch_size == 0 || opts.max_text_len == 0 {
        return Err(Error::Config("gradient check needs a non-empty fixture".into()));
    }
    let batch = gradient_fixture(cfg, opts)?;
    let params = init_parameters(cfg);
    let (_, mut grads) = loss_and_grads(&batch, &params, cfg)?;
    if let Some(name) = &opts.corrupt {
        let g = grads
            .get_mut(name)
            .ok_or_else(|| Error::UnknownId(format!("parameter `{name}`")))?;
        for v in g.data_mut() {
            *v = *v * 1.5 + 1e-3;
        }
    }
    let base = forward(&batch, &params, cfg)?.logits;
    let loss = |p: &ParamStore| forward(&batch, p, cfg).map(|o| shifted_loss(&batch, &o.logits, &base, cfg.class_weights));
    grad_check(&params, &grads, loss, opts.delta, opts.tol)
}
