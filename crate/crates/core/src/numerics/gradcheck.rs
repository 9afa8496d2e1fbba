use serde::{Deserialize, Serialize};

use crate::error::Result;

use super::params::{GradMap, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub delta: f64,
    pub tol: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| !e.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.numel).sum()
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `loss` for every scalar
/// of every parameter in `params`.
pub fn grad_check<F>(params: &ParamStore, analytic: &GradMap, mut loss: F, delta: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut entries = Vec::with_capacity(params.len());
    let mut probe = params.clone();
    for (name, tensor) in params.iter() {
        let mut worst = (0.0f64, 0usize);
        for i in 0..tensor.numel() {
            let original = tensor.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = original + delta;
            let up = loss(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = original - delta;
            let down = loss(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = original;

            let numeric = (up - down) / (2.0 * delta);
            let a = analytic.get(name).map_or(0.0, |g| g.data()[i]);
            let err = relative_error(a, numeric);
            if err > worst.0 || err.is_nan() {
                worst = (err, i);
            }
        }
        entries.push(GradCheckEntry {
            name: name.to_string(),
            numel: tensor.numel(),
            max_rel_err: worst.0,
            worst_index: worst.1,
            passed: worst.0 <= tol,
        });
    }
    Ok(GradCheckReport { delta, tol, entries })
}
