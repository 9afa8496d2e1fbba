use cirm_core::data::make_batch;
use cirm_core::metrics::{render_report_lines, MetricsReport};
use cirm_core::model::{forward, ForwardTrace, ModelConfig};
use cirm_core::train::evaluate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::Result;

use super::dump::trace_header;
use super::{csv_text, fit, load_splits, out_path, write_output, EVAL_BATCH};

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub report: MetricsReport,
}

/// One exported forward trace tagged with its grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepTrace {
    pub alpha: f64,
    pub trace: ForwardTrace,
}

/// Trains and evaluates one model per α in `eval.alpha_grid` (sorted) with the
/// same seed, then writes `sweep.csv`, `sweep.jsonl` and `sweep-traces.jsonl`.
pub fn cmd_sweep_alpha(exp: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    let splits = load_splits(exp)?;
    let mut grid = exp.eval.alpha_grid.clone();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let traced = &splits.test[..exp.sweep.trace_samples.min(splits.test.len())];

    let cells: Vec<Result<(SweepRow, Vec<ForwardTrace>)>> = grid
        .par_iter()
        .map(|&alpha| {
            let model = ModelConfig { alpha, ..exp.model.clone() };
            let (cfg, outcome) = fit(exp, &model, exp.seed, &splits, &format!("alpha {alpha}"))?;
            let mut report = evaluate(&outcome.best_params, &cfg, &splits.test, EVAL_BATCH)?.named(format!("alpha={alpha}"));
            report.alpha = Some(alpha);
            report.epoch = outcome.best_epoch;
            let traces = if traced.is_empty() {
                Vec::new()
            } else {
                forward(&make_batch(traced, cfg.n_max)?, &outcome.best_params, &cfg)?.traces
            };
            Ok((SweepRow { alpha, report }, traces))
        })
        .collect();

    let mut rows = Vec::with_capacity(grid.len());
    let mut trace_text = trace_header();
    for cell in cells {
        let (row, traces) = cell?;
        for trace in traces {
            let line = SweepTrace { alpha: row.alpha, trace };
            trace_text.push_str(&serde_json::to_string(&line).expect("traces serialize"));
            trace_text.push('\n');
        }
        rows.push(row);
    }

    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                format!("{:?}", r.alpha),
                format!("{:.6}", r.report.accuracy),
                format!("{:.6}", r.report.macro_precision),
                format!("{:.6}", r.report.macro_recall),
                format!("{:.6}", r.report.macro_f1),
            ]
        })
        .collect();
    let reports: Vec<MetricsReport> = rows.iter().map(|r| r.report.clone()).collect();
    write_output(
        &out_path(exp, "sweep.csv"),
        &csv_text(&["alpha", "accuracy", "macro_precision", "macro_recall", "macro_f1"], &body),
    )?;
    write_output(&out_path(exp, "sweep.jsonl"), &render_report_lines(&reports))?;
    write_output(&out_path(exp, "sweep-traces.jsonl"), &trace_text)?;
    Ok(rows)
}
