use std::path::Path;

use cirm_core::data::{make_batch, EmbeddingRecord};
use cirm_core::model::{forward, ForwardTrace};
use cirm_core::Error;

use crate::config::ExperimentConfig;
use crate::error::Result;

use super::eval::{load_model, load_split_for};
use super::{out_path, write_output, EVAL_BATCH};

pub const TRACE_FORMAT: &str = "cirm-trace";

pub(crate) fn trace_header() -> String {
    format!("{{\"format\":\"{TRACE_FORMAT}\",\"version\":1}}\n")
}

/// Forward traces (relevance weights, gates, attention maps) for the requested
/// ids of `split`, in request order, written to `attention.jsonl`.
pub fn cmd_dump_attention(
    exp: &ExperimentConfig,
    checkpoint: &Path,
    split: &str,
    ids: &[String],
) -> Result<Vec<ForwardTrace>> {
    let (cfg, params) = load_model(checkpoint)?;
    let records = load_split_for(exp, split, &cfg, checkpoint)?;
    let selected: Vec<EmbeddingRecord> = ids
        .iter()
        .map(|id| {
            records
                .iter()
                .find(|r| &r.id == id)
                .cloned()
                .ok_or_else(|| Error::UnknownId(id.clone()))
        })
        .collect::<std::result::Result<_, _>>()?;

    let mut traces = Vec::with_capacity(selected.len());
    for chunk in selected.chunks(EVAL_BATCH) {
        traces.extend(forward(&make_batch(chunk, cfg.n_max)?, &params, &cfg)?.traces);
    }
    let mut text = trace_header();
    for t in &traces {
        text.push_str(&serde_json::to_string(t).expect("traces serialize"));
        text.push('\n');
    }
    write_output(&out_path(exp, "attention.jsonl"), &text)?;
    Ok(traces)
}
