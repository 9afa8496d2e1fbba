//! One function per subcommand. Each reads its inputs, writes its output files
//! under `ExperimentConfig::out` and returns what it wrote for printing.

mod ablate;
mod data;
mod dump;
mod eval;
mod grad;
mod sweep;
mod train;

use std::fs;
use std::path::{Path, PathBuf};

use cirm_core::data::{read_records, EmbeddingRecord};
use cirm_core::model::{balanced_class_weights, ModelConfig};
use cirm_core::train::{train, TrainOutcome};
use cirm_core::Error;

use crate::config::ExperimentConfig;
use crate::error::Result;

pub use ablate::{cmd_ablate, render_ablation_table, AblationRow, ABLATION_ROWS};
pub use data::{cmd_gen_data, GenSummary};
pub use dump::{cmd_dump_attention, TRACE_FORMAT};
pub use eval::{cmd_eval, View};
pub use grad::{cmd_grad_check, render_grad_check, GRAD_CHECK_FORMAT};
pub use sweep::{cmd_sweep_alpha, SweepRow, SweepTrace};
pub use train::{cmd_train, TrainSummary};

/// Batch size used for inference; results do not depend on it.
pub const EVAL_BATCH: usize = 64;

pub(crate) fn write_output(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub(crate) fn out_path(exp: &ExperimentConfig, file: &str) -> PathBuf {
    exp.out.join(file)
}

/// Renders rows as CSV text with a header.
pub(crate) fn csv_text(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv");
    for r in rows {
        w.write_record(r).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv of utf-8 fields")
}

pub(crate) struct Splits {
    pub train: Vec<EmbeddingRecord>,
    pub val: Vec<EmbeddingRecord>,
    pub test: Vec<EmbeddingRecord>,
}

/// Records of one split and their embedding width.
pub(crate) fn read_split(exp: &ExperimentConfig, split: &str) -> Result<(Vec<EmbeddingRecord>, usize)> {
    let path = exp.data.split_path(split);
    let file = read_records(&path)?;
    if file.records.is_empty() {
        return Err(Error::Data(format!("{} holds no records", path.display())).into());
    }
    Ok((file.records, file.d))
}

pub(crate) fn load_split(exp: &ExperimentConfig, split: &str) -> Result<Vec<EmbeddingRecord>> {
    let (records, d) = read_split(exp, split)?;
    if d != exp.model.d {
        return Err(Error::Config(format!(
            "model.d={} but the {split} split holds d={d} embeddings",
            exp.model.d
        ))
        .into());
    }
    Ok(records)
}

pub(crate) fn load_splits(exp: &ExperimentConfig) -> Result<Splits> {
    Ok(Splits { train: load_split(exp, "train")?, val: load_split(exp, "val")?, test: load_split(exp, "test")? })
}

/// Trains `model` with the experiment's optimizer settings and `seed`.
/// Returns the model config actually used (seed and class weights filled in).
pub(crate) fn fit(
    exp: &ExperimentConfig,
    model: &ModelConfig,
    seed: u64,
    splits: &Splits,
    tag: &str,
) -> Result<(ModelConfig, TrainOutcome)> {
    let mut cfg = ModelConfig { seed, ..model.clone() };
    if exp.train.balanced_class_weights {
        cfg.class_weights = balanced_class_weights(splits.train.iter().map(|r| r.label));
    }
    let train_cfg = exp.train.to_train_config(seed);
    let epochs = train_cfg.epochs;
    let outcome = train(&cfg, &train_cfg, &splits.train, &splits.val, |r| {
        eprintln!(
            "[{tag}] epoch {}/{epochs} train loss {:.5} val acc {:.2} val F1 {:.2}",
            r.epoch.unwrap_or(0),
            r.loss.unwrap_or(f64::NAN),
            r.accuracy * 100.0,
            r.macro_f1 * 100.0
        );
    })?;
    Ok((cfg, outcome))
}

pub(crate) fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}
