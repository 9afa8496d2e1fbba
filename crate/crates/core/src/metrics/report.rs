use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::classification::{per_class_scores, ClassScores, Confusion};
use super::wilson::{wilson_interval, Z_95};

pub const REPORT_FORMAT: &str = "cirm-report";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub n: usize,
    pub confusion: Confusion,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// `[negative, positive]`
    pub per_class: [ClassScores; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wilson_ci: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_count: Option<usize>,
    pub config_hash: String,
    pub seed: u64,
}

/// Accuracy and macro-averaged precision, recall and F1 over the two classes.
pub fn macro_metrics(preds: &[u8], labels: &[u8]) -> Result<MetricsReport> {
    let confusion = Confusion::from_predictions(preds, labels)?;
    if confusion.total() == 0 {
        return Err(Error::Domain("metrics need at least one prediction".into()));
    }
    Ok(report_from_confusion(confusion))
}

pub fn report_from_confusion(confusion: Confusion) -> MetricsReport {
    let per_class = per_class_scores(&confusion);
    let mean = |f: fn(&ClassScores) -> f64| per_class.iter().map(f).sum::<f64>() / 2.0;
    MetricsReport {
        n: confusion.total(),
        confusion,
        accuracy: confusion.correct() as f64 / confusion.total().max(1) as f64,
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        per_class,
        ..Default::default()
    }
}

impl MetricsReport {
    pub fn with_wilson(mut self) -> Self {
        self.wilson_ci = wilson_interval(self.confusion.correct(), self.n, Z_95).ok();
        self
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    /// One JSON object per line, full precision.
    Lines,
    /// Fixed-width table, percentages with two decimals.
    Table,
}

pub fn report_header() -> String {
    format!("{{\"format\":\"{REPORT_FORMAT}\",\"version\":1}}")
}

pub fn render_report(report: &MetricsReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Lines => serde_json::to_string(report).expect("reports serialize"),
        ReportFormat::Table => render_table(std::slice::from_ref(report)),
    }
}

/// Header line followed by one line per report.
pub fn render_report_lines(reports: &[MetricsReport]) -> String {
    let mut out = report_header();
    out.push('\n');
    for r in reports {
        out.push_str(&render_report(r, ReportFormat::Lines));
        out.push('\n');
    }
    out
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

pub fn render_table(reports: &[MetricsReport]) -> String {
    let name_w = reports
        .iter()
        .map(|r| r.name.as_deref().unwrap_or("-").len())
        .max()
        .unwrap_or(1)
        .max(5);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<name_w$}  {:>6}  {:>6}  {:>6}  {:>6}  {:>16}  {:>6}",
        "Model", "Acc", "P", "R", "F1", "Acc 95% CI", "n"
    );
    for r in reports {
        let ci = r
            .wilson_ci
            .map(|(lo, hi)| format!("[{}, {}]", pct(lo), pct(hi)))
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{:<name_w$}  {:>6}  {:>6}  {:>6}  {:>6}  {:>16}  {:>6}",
            r.name.as_deref().unwrap_or("-"),
            pct(r.accuracy),
            pct(r.macro_precision),
            pct(r.macro_recall),
            pct(r.macro_f1),
            ci,
            r.n
        );
    }
    out
}

pub fn parse_report_line(line: &str) -> Result<MetricsReport> {
    serde_json::from_str(line).map_err(|e| Error::Parse { path: "<report>".into(), line: 1, message: e.to_string() })
}

/// Parses a lines-format report file (header + reports).
pub fn parse_report_lines(text: &str) -> Result<Vec<MetricsReport>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h == report_header() => {}
        _ => return Err(Error::Parse { path: "<report>".into(), line: 1, message: "missing report header".into() }),
    }
    lines
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse { path: "<report>".into(), line: i + 1, message: e.to_string() })
        })
        .collect()
}
