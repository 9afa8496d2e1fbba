use std::fmt::Write as _;

use cirm_core::metrics::{render_report_lines, MetricsReport};
use cirm_core::model::{parameter_count, Ablation, ModelConfig};
use cirm_core::train::evaluate;
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::Result;

use super::{csv_text, fit, load_splits, out_path, pct, write_output, EVAL_BATCH};

/// Row order of the ablation table: every "w/o" variant, then the full model.
pub const ABLATION_ROWS: [Option<Ablation>; 8] = [
    Some(Ablation::Dsbm),
    Some(Ablation::Pe),
    Some(Ablation::Ocr),
    Some(Ablation::Rgf),
    Some(Ablation::DsbmPre),
    Some(Ablation::DsbmSequence),
    Some(Ablation::DsbmPost),
    None,
];

pub(crate) const FULL_MODEL: &str = "CIRM";

fn row_label(row: Option<Ablation>) -> &'static str {
    row.map_or(FULL_MODEL, Ablation::label)
}

/// Test metrics of one variant, averaged over the training seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub param_count: usize,
    pub seeds: Vec<u64>,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub reports: Vec<MetricsReport>,
}

fn mean(reports: &[MetricsReport], f: fn(&MetricsReport) -> f64) -> f64 {
    reports.iter().map(f).sum::<f64>() / reports.len() as f64
}

pub fn render_ablation_table(rows: &[AblationRow]) -> String {
    let w = rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
    let mut out = String::new();
    let _ = writeln!(out, "{:<w$}  {:>8}  {:>6}  {:>6}  {:>6}  {:>6}", "Model", "Params", "Acc", "P", "R", "F1");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<w$}  {:>8}  {:>6}  {:>6}  {:>6}  {:>6}",
            r.label,
            r.param_count,
            pct(r.accuracy),
            pct(r.macro_precision),
            pct(r.macro_recall),
            pct(r.macro_f1)
        );
    }
    out
}

fn ablation_csv(rows: &[AblationRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                r.param_count.to_string(),
                r.seeds.len().to_string(),
                format!("{:.6}", r.accuracy),
                format!("{:.6}", r.macro_precision),
                format!("{:.6}", r.macro_recall),
                format!("{:.6}", r.macro_f1),
            ]
        })
        .collect();
    csv_text(&["model", "param_count", "seeds", "accuracy", "macro_precision", "macro_recall", "macro_f1"], &body)
}

/// Trains the full model and each single-component ablation with identical
/// data and seeds, then writes `ablation.jsonl`, `ablation.csv` and `ablation.txt`.
pub fn cmd_ablate(exp: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    let splits = load_splits(exp)?;
    let seeds = if exp.ablate.seeds.is_empty() { vec![exp.seed] } else { exp.ablate.seeds.clone() };
    let variants: Vec<(Option<Ablation>, ModelConfig)> =
        ABLATION_ROWS.iter().map(|&a| (a, a.map_or_else(|| exp.model.clone(), |a| exp.model.ablate(a)))).collect();
    let cells: Vec<(usize, u64)> = (0..variants.len()).flat_map(|v| seeds.iter().map(move |&s| (v, s))).collect();

    let results: Vec<Result<MetricsReport>> = cells
        .par_iter()
        .map(|&(v, seed)| {
            let (row, model) = &variants[v];
            let tag = format!("{} seed {seed}", row_label(*row));
            let (cfg, outcome) = fit(exp, model, seed, &splits, &tag)?;
            let mut report = evaluate(&outcome.best_params, &cfg, &splits.test, EVAL_BATCH)?.named(row_label(*row));
            report.param_count = Some(parameter_count(&cfg));
            report.epoch = outcome.best_epoch;
            Ok(report)
        })
        .collect();
    let reports = results.into_iter().collect::<Result<Vec<_>>>()?;

    let rows: Vec<AblationRow> = variants
        .iter()
        .enumerate()
        .map(|(v, (row, model))| {
            let mine: Vec<MetricsReport> =
                cells.iter().zip(&reports).filter(|((cv, _), _)| *cv == v).map(|(_, r)| r.clone()).collect();
            AblationRow {
                label: row_label(*row).to_string(),
                param_count: parameter_count(model),
                seeds: seeds.clone(),
                accuracy: mean(&mine, |r| r.accuracy),
                macro_precision: mean(&mine, |r| r.macro_precision),
                macro_recall: mean(&mine, |r| r.macro_recall),
                macro_f1: mean(&mine, |r| r.macro_f1),
                reports: mine,
            }
        })
        .collect();

    write_output(&out_path(exp, "ablation.jsonl"), &render_report_lines(&reports))?;
    write_output(&out_path(exp, "ablation.csv"), &ablation_csv(&rows))?;
    write_output(&out_path(exp, "ablation.txt"), &render_ablation_table(&rows))?;
    Ok(rows)
}
