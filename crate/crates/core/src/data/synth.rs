//! Planted-signal synthetic corpus.
//!
//! Each record carries 2-4 unit image vectors. The first is uniform on the
//! sphere; later ones are perturbed copies of it, either aligned or negated.
//! A record is positive exactly when some pair of its images points in
//! opposing directions, so the label is only recoverable by comparing images
//! with each other. Text rows are pure noise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

use super::record::{DatasetSplit, EmbeddingRecord, SplitTag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub count: usize,
    pub d: usize,
    /// Perturbation size relative to the unit image vectors, in `[0, 1)`.
    pub noise: f64,
    /// Contrast threshold: positive iff some cosine is below `-tau`.
    pub tau: f64,
    pub min_text_len: usize,
    pub max_text_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { seed: 42, count: 4000, d: 32, noise: 0.1, tau: 0.0, min_text_len: 3, max_text_len: 12 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 4 {
            return Err(Error::Config(format!("synthetic d must be >= 4, got {}", self.d)));
        }
        if self.count < 10 {
            return Err(Error::Config(format!("synthetic count must be >= 10, got {}", self.count)));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise must lie in [0, 1), got {}", self.noise)));
        }
        if !self.tau.is_finite() {
            return Err(Error::Config("tau must be finite".into()));
        }
        if self.min_text_len == 0 || self.min_text_len > self.max_text_len {
            return Err(Error::Config(format!(
                "text length range {}..={} is empty",
                self.min_text_len, self.max_text_len
            )));
        }
        Ok(())
    }
}

/// 1 iff the smallest pairwise cosine between image rows is below `-tau`.
pub fn contrast_label(images: &Tensor, tau: f64) -> u8 {
    let unit: Vec<Vec<f64>> = (0..images.rows())
        .map(|i| {
            let r = images.row(i);
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    let mut min_cos = f64::INFINITY;
    for i in 0..unit.len() {
        for j in i + 1..unit.len() {
            let c: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum();
            min_cos = min_cos.min(c);
        }
    }
    u8::from(min_cos < -tau)
}

fn perturbed(rng: &mut Rng, base: &[f64], sign: f64, noise: f64) -> Vec<f64> {
    let jitter = rng.unit_vector(base.len());
    let v: Vec<f64> = base.iter().zip(&jitter).map(|(b, j)| sign * b + noise * j).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn generate_record(rng: &mut Rng, cfg: &SynthConfig, index: usize) -> EmbeddingRecord {
    let d = cfg.d;
    let n = rng.int_in(2, 4);
    let first = rng.unit_vector(d);

    let contrastive = rng.coin(0.5);
    let mut signs = vec![1.0; n];
    if contrastive {
        for s in signs.iter_mut().skip(1) {
            if rng.coin(0.5) {
                *s = -1.0;
            }
        }
        if signs.iter().all(|&s| s > 0.0) {
            let k = rng.int_in(1, n - 1);
            signs[k] = -1.0;
        }
    }

    let mut image_rows = vec![first];
    for &sign in &signs[1..] {
        let base = image_rows[0].clone();
        image_rows.push(perturbed(rng, &base, sign, cfg.noise));
    }

    let mut ocr_rows = Vec::with_capacity(n);
    let mut ocr_present = Vec::with_capacity(n);
    for img in &image_rows {
        if rng.coin(0.5) {
            ocr_rows.push(perturbed(rng, img, 1.0, cfg.noise));
            ocr_present.push(true);
        } else {
            ocr_rows.push(vec![0.0; d]);
            ocr_present.push(false);
        }
    }

    let len = rng.int_in(cfg.min_text_len, cfg.max_text_len);
    let scale = 1.0 / (d as f64).sqrt();
    let text_rows: Vec<Vec<f64>> = (0..len).map(|_| (0..d).map(|_| rng.normal() * scale).collect()).collect();

    let images = Tensor::from_rows(&image_rows).expect("uniform rows");
    let label = contrast_label(&images, cfg.tau);
    EmbeddingRecord {
        id: format!("syn-{}-{index:06}", cfg.seed),
        text: Tensor::from_rows(&text_rows).expect("uniform rows"),
        images,
        ocr: Tensor::from_rows(&ocr_rows).expect("uniform rows"),
        ocr_present,
        rating: 0,
        label,
    }
}

fn random_matrix(rng: &mut Rng, rows: usize, d: usize) -> Tensor {
    let data = (0..rows * d).map(|_| rng.normal()).collect();
    Tensor::new(vec![rows, d], data).expect("shape matches data")
}

/// Unstructured record with Gaussian features, 1..=`n_max` images, 1..=`max_text_len`
/// tokens, random OCR presence, rating and label. Used for fixtures and checks.
pub fn random_record(rng: &mut Rng, id: impl Into<String>, d: usize, max_text_len: usize, n_max: usize) -> EmbeddingRecord {
    let len = rng.int_in(1, max_text_len);
    let n = rng.int_in(1, n_max);
    random_record_sized(rng, id, d, len, n)
}

/// [`random_record`] with a fixed text length and image count.
pub fn random_record_sized(rng: &mut Rng, id: impl Into<String>, d: usize, len: usize, n: usize) -> EmbeddingRecord {
    let text = random_matrix(rng, len, d);
    let images = random_matrix(rng, n, d);
    let ocr_present: Vec<bool> = (0..n).map(|_| rng.coin(0.5)).collect();
    let mut ocr = random_matrix(rng, n, d);
    for (i, &present) in ocr_present.iter().enumerate() {
        if !present {
            ocr.row_mut(i).fill(0.0);
        }
    }
    EmbeddingRecord {
        id: id.into(),
        text,
        images,
        ocr,
        ocr_present,
        rating: rng.int_in(0, usize::from(super::record::MAX_RATING)) as u8,
        label: u8::from(rng.coin(0.5)),
    }
}

/// Record counts for a 70/15/15 split.
pub fn split_sizes(count: usize) -> (usize, usize, usize) {
    let train = count * 70 / 100;
    let val = count * 15 / 100;
    (train, val, count - train - val)
}

/// Generates `(train, val, test)` deterministically from `cfg.seed`.
pub fn generate_synthetic_dataset(cfg: &SynthConfig) -> Result<(DatasetSplit, DatasetSplit, DatasetSplit)> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let mut records: Vec<EmbeddingRecord> = (0..cfg.count).map(|i| generate_record(&mut rng, cfg, i)).collect();
    let (n_train, n_val, _) = split_sizes(cfg.count);
    let test = records.split_off(n_train + n_val);
    let val = records.split_off(n_train);
    let split = |tag, records| DatasetSplit { tag, seed: cfg.seed, records };
    Ok((split(SplitTag::Train, records), split(SplitTag::Val, val), split(SplitTag::Test, test)))
}
