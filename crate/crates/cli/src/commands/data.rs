use cirm_core::data::{generate_synthetic_dataset, records_to_string};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::Result;

use super::{out_path, write_output};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenSummary {
    /// `(split, records, positive rate)`
    pub splits: Vec<(String, usize, f64)>,
}

impl GenSummary {
    pub fn render(&self) -> String {
        self.splits
            .iter()
            .map(|(name, n, rate)| format!("{name:<5} {n:>6} records, {:.2}% positive\n", rate * 100.0))
            .collect()
    }
}

/// Generates the synthetic corpus and writes `train.jsonl`, `val.jsonl` and `test.jsonl`.
pub fn cmd_gen_data(exp: &ExperimentConfig) -> Result<GenSummary> {
    let synth = &exp.data.synth;
    let (train, val, test) = generate_synthetic_dataset(synth)?;
    let mut splits = Vec::new();
    for split in [train, val, test] {
        let name = split.tag.as_str();
        write_output(&out_path(exp, &format!("{name}.jsonl")), &records_to_string(&split.records, synth.d)?)?;
        splits.push((name.to_string(), split.len(), split.positive_rate()));
    }
    Ok(GenSummary { splits })
}
