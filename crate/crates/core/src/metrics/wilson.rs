use crate::error::{Error, Result};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.96;

/// Wilson score interval for `successes` out of `n`, clamped to `[0, 1]`.
pub fn wilson_interval(successes: usize, n: usize, z: f64) -> Result<(f64, f64)> {
    if n == 0 || successes > n {
        return Err(Error::Domain(format!("wilson interval needs 0 <= {successes} <= n = {n}, n >= 1")));
    }
    if !(z.is_finite() && z > 0.0) {
        return Err(Error::Domain(format!("z must be positive, got {z}")));
    }
    let n_f = n as f64;
    let p = successes as f64 / n_f;
    let z2 = z * z;
    let denom = 1.0 + z2 / n_f;
    let center = (p + z2 / (2.0 * n_f)) / denom;
    let half = z * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt() / denom;
    Ok(((center - half).max(0.0), (center + half).min(1.0)))
}
