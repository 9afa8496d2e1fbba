use std::fmt;
use std::path::Path;
use std::str::FromStr;

use cirm_core::data::{shuffle_images_view, truncate_view, EmbeddingRecord};
use cirm_core::metrics::{render_report_lines, MetricsReport};
use cirm_core::model::{load_checkpoint, ModelConfig};
use cirm_core::train::evaluate;
use cirm_core::{Error, ParamStore, Rng};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

use super::{out_path, read_split, write_output, EVAL_BATCH};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    Plain,
    Shuffled,
    Truncated,
    All,
}

impl View {
    pub fn key(self) -> &'static str {
        match self {
            View::Plain => "plain",
            View::Shuffled => "shuffled",
            View::Truncated => "truncated",
            View::All => "all",
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for View {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        [View::Plain, View::Shuffled, View::Truncated, View::All]
            .into_iter()
            .find(|v| v.key() == s)
            .ok_or_else(|| format!("unknown view `{s}` (expected plain, shuffled, truncated or all)"))
    }
}

/// Loads a checkpoint, reporting any failure as a checkpoint error.
pub(crate) fn load_model(path: &Path) -> Result<(ModelConfig, ParamStore)> {
    load_checkpoint(path).map_err(|source| CliError::Checkpoint { path: path.to_path_buf(), source })
}

/// Loads `split` and checks that it fits the checkpoint's model.
pub(crate) fn load_split_for(
    exp: &ExperimentConfig,
    split: &str,
    cfg: &ModelConfig,
    checkpoint: &Path,
) -> Result<Vec<EmbeddingRecord>> {
    let (records, d) = read_split(exp, split)?;
    if d != cfg.d {
        return Err(CliError::Checkpoint {
            path: checkpoint.to_path_buf(),
            source: Error::Checkpoint(format!("model has d={} but the {split} split holds d={d}", cfg.d)),
        });
    }
    Ok(records)
}

/// Per-record seed for the shuffled view.
fn record_seed(base: u64, index: usize) -> u64 {
    base ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub(crate) fn shuffled(records: &[EmbeddingRecord], seed: u64) -> Vec<EmbeddingRecord> {
    records.iter().enumerate().map(|(i, r)| shuffle_images_view(r, record_seed(seed, i))).collect()
}

/// The paired truncation subset: records with at least `min_text_len` tokens,
/// in a seeded order, cut to `subset_size`.
pub(crate) fn truncation_subset(records: &[EmbeddingRecord], exp: &ExperimentConfig) -> Vec<EmbeddingRecord> {
    let mut eligible: Vec<&EmbeddingRecord> = records.iter().filter(|r| r.text_len() >= exp.eval.min_text_len).collect();
    Rng::new(exp.eval.shuffle_seed).shuffle(&mut eligible);
    eligible.truncate(exp.eval.subset_size);
    eligible.into_iter().cloned().collect()
}

fn report(
    params: &ParamStore,
    cfg: &ModelConfig,
    records: &[EmbeddingRecord],
    name: impl Into<String>,
) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::Data("evaluation view selected no records".into()).into());
    }
    Ok(evaluate(params, cfg, records, EVAL_BATCH)?.with_wilson().named(name))
}

/// Evaluates a checkpoint on the test split under `view` and writes
/// `eval-<view>.jsonl`. The truncated view yields a paired full-text and
/// first-K-tokens row over the same subset.
pub fn cmd_eval(exp: &ExperimentConfig, checkpoint: &Path, view: View) -> Result<Vec<MetricsReport>> {
    let (cfg, params) = load_model(checkpoint)?;
    let test = load_split_for(exp, "test", &cfg, checkpoint)?;
    let mut reports = Vec::new();
    if matches!(view, View::Plain | View::All) {
        reports.push(report(&params, &cfg, &test, "plain")?);
    }
    if matches!(view, View::Shuffled | View::All) {
        reports.push(report(&params, &cfg, &shuffled(&test, exp.eval.shuffle_seed), "shuffled")?);
    }
    if matches!(view, View::Truncated | View::All) {
        let subset = truncation_subset(&test, exp);
        let k = exp.eval.truncate_k;
        let cut: Vec<EmbeddingRecord> = subset.iter().map(|r| truncate_view(r, k)).collect();
        reports.push(report(&params, &cfg, &subset, "full-text")?);
        reports.push(report(&params, &cfg, &cut, format!("first-{k}-tokens"))?);
    }
    write_output(&out_path(exp, &format!("eval-{}.jsonl", view.key())), &render_report_lines(&reports))?;
    Ok(reports)
}
