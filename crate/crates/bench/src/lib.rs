//! Fixtures shared by the benchmarks.

use cirm_core::data::{make_batch, random_record, Batch};
use cirm_core::model::ModelConfig;
use cirm_core::numerics::ScanInputs;
use cirm_core::{Rng, Tensor};

/// Random padded batch sized for `cfg`.
pub fn batch(cfg: &ModelConfig, size: usize, max_text_len: usize, seed: u64) -> Batch {
    let mut rng = Rng::new(seed);
    let records: Vec<_> =
        (0..size).map(|i| random_record(&mut rng, format!("b{i}"), cfg.d, max_text_len, cfg.n_max)).collect();
    make_batch(&records, cfg.n_max).expect("random records batch")
}

/// Owned inputs of one selective scan.
pub struct ScanCase {
    pub u: Tensor,
    pub delta: Tensor,
    pub b: Tensor,
    pub c: Tensor,
    pub a_log: Tensor,
    pub skip: Tensor,
}

impl ScanCase {
    pub fn random(t: usize, d: usize, s: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut m = |r: usize, c: usize, lo: f64, hi: f64| {
            Tensor::new(vec![r, c], (0..r * c).map(|_| rng.uniform_in(lo, hi)).collect()).expect("shape")
        };
        let u = m(t, d, -1.0, 1.0);
        let delta = m(t, d, 0.01, 1.0);
        let b = m(t, s, -1.0, 1.0);
        let c = m(t, s, -1.0, 1.0);
        let a_log = m(1, s, -2.0, 1.0).reshape(vec![s]).expect("shape");
        let skip = m(1, d, -1.0, 1.0).reshape(vec![d]).expect("shape");
        Self { u, delta, b, c, a_log, skip }
    }

    pub fn inputs(&self) -> ScanInputs<'_> {
        ScanInputs { u: &self.u, delta: &self.delta, b: &self.b, c: &self.c, a_log: &self.a_log, skip: &self.skip }
    }
}
