//! Experiment configuration: one nested TOML file plus command-line overrides.
//!
//! ```toml
//! seed = 42
//! out = "runs/full"
//! workers = 1
//!
//! [data]
//! dir = "data"              # holds train.jsonl, val.jsonl, test.jsonl
//! # test = "other/test.jsonl"
//!
//! [data.synth]
//! count = 4000
//! d = 32
//! noise = 0.1
//!
//! [model]
//! d = 32
//! heads = 4
//! alpha = 0.3
//!
//! [model.toggles]
//! pe = false
//!
//! [train]
//! lr = 2e-5
//! weight_decay = 1e-5
//! batch_size = 16
//! epochs = 30
//! balanced_class_weights = true
//!
//! [eval]
//! shuffle_seed = 7
//! truncate_k = 15
//!
//! [ablate]
//! seeds = [42, 43, 44]
//! ```
//!
//! The top-level `seed` drives the generator, the initialization and the batch
//! order; seed keys inside sections are overwritten by it.

use std::fs;
use std::path::{Path, PathBuf};

use cirm_core::data::SynthConfig;
use cirm_core::model::{GradCheckOptions, ModelConfig};
use cirm_core::numerics::AdamWConfig;
use cirm_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{config_error, CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub workers: usize,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    pub sweep: SweepConfig,
    pub grad_check: GradCheckSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            out: PathBuf::from("out"),
            workers: 1,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
            sweep: SweepConfig::default(),
            grad_check: GradCheckSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("data"), train: None, val: None, test: None, synth: SynthConfig::default() }
    }
}

impl DataConfig {
    pub fn split_path(&self, split: &str) -> PathBuf {
        let explicit = match split {
            "train" => &self.train,
            "val" => &self.val,
            _ => &self.test,
        };
        explicit.clone().unwrap_or_else(|| self.dir.join(format!("{split}.jsonl")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Replace `model.class_weights` with inverse class frequencies of the train split.
    pub balanced_class_weights: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let o = AdamWConfig::default();
        let t = TrainConfig::default();
        Self {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            batch_size: t.batch_size,
            epochs: t.epochs,
            balanced_class_weights: true,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            optim: AdamWConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                weight_decay: self.weight_decay,
            },
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub shuffle_seed: u64,
    /// Tokens kept by the truncated view.
    pub truncate_k: usize,
    /// Only records with at least this many tokens enter the truncation study.
    pub min_text_len: usize,
    /// Size of the paired truncation subset; smaller splits are used whole.
    pub subset_size: usize,
    pub alpha_grid: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            shuffle_seed: 7,
            truncate_k: 15,
            min_text_len: 0,
            subset_size: 500,
            alpha_grid: (0..=10).map(|i| f64::from(i) / 10.0).collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    /// Training seeds per variant; empty means the top-level seed alone.
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Test samples whose relevance traces are exported per grid point.
    pub trace_samples: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { trace_samples: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckSection {
    pub delta: f64,
    pub tol: f64,
    pub batch_size: usize,
    pub max_text_len: usize,
    pub data_seed: u64,
    pub model: ModelConfig,
}

impl Default for GradCheckSection {
    fn default() -> Self {
        let o = GradCheckOptions::default();
        Self {
            delta: o.delta,
            tol: o.tol,
            batch_size: o.batch_size,
            max_text_len: o.max_text_len,
            data_seed: o.data_seed,
            model: ModelConfig { class_weights: [0.83, 1.26], ..ModelConfig::tiny() },
        }
    }
}

impl GradCheckSection {
    pub fn options(&self) -> GradCheckOptions {
        GradCheckOptions {
            delta: self.delta,
            tol: self.tol,
            batch_size: self.batch_size,
            max_text_len: self.max_text_len,
            data_seed: self.data_seed,
            corrupt: None,
        }
    }
}

/// Flag values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub data_dir: Option<PathBuf>,
    pub epochs: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, source: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::ConfigFile { path: source.to_path_buf(), message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::ConfigFile { path: path.to_path_buf(), message: e.to_string() })?;
        Self::from_toml(&text, path)
    }

    /// File (or defaults) with flags applied, seeds propagated and values checked.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
        if let Some(dir) = &o.data_dir {
            self.data.dir = dir.clone();
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
        }
        self.model.seed = self.seed;
        self.data.synth.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.synth.validate()?;
        if self.workers == 0 {
            return Err(config_error("workers must be at least 1"));
        }
        if self.train.batch_size == 0 {
            return Err(config_error("train.batch_size must be positive"));
        }
        if self.train.lr.is_nan() || self.train.lr <= 0.0 {
            return Err(config_error("train.lr must be positive"));
        }
        if self.eval.alpha_grid.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(config_error("eval.alpha_grid must lie in [0, 1]"));
        }
        if self.eval.truncate_k == 0 {
            return Err(config_error("eval.truncate_k must be positive"));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train.to_train_config(self.seed)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }
}
