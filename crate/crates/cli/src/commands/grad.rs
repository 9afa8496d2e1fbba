use cirm_core::model::{check_model_gradients, parameter_count};
use cirm_core::numerics::GradCheckReport;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::Result;

use super::{out_path, write_output};

pub const GRAD_CHECK_FORMAT: &str = "cirm-gradcheck";

#[derive(Serialize)]
struct Summary<'a> {
    format: &'a str,
    version: u32,
    passed: bool,
    delta: f64,
    tol: f64,
    max_rel_err: f64,
    param_count: usize,
    scalar_count: usize,
}

/// Central-difference check of every parameter gradient on the configured
/// small model. Writes `grad-check.jsonl`: a summary line, then one line per
/// parameter tensor. `corrupt` perturbs one analytic gradient on purpose.
pub fn cmd_grad_check(exp: &ExperimentConfig, corrupt: Option<&str>) -> Result<GradCheckReport> {
    let gc = &exp.grad_check;
    let opts = cirm_core::model::GradCheckOptions { corrupt: corrupt.map(String::from), ..gc.options() };
    let report = check_model_gradients(&gc.model, &opts)?;

    let summary = Summary {
        format: GRAD_CHECK_FORMAT,
        version: 1,
        passed: report.passed(),
        delta: report.delta,
        tol: report.tol,
        max_rel_err: report.max_rel_err(),
        param_count: parameter_count(&gc.model),
        scalar_count: report.scalar_count(),
    };
    let mut text = serde_json::to_string(&summary).expect("summary serializes");
    text.push('\n');
    for e in &report.entries {
        text.push_str(&serde_json::to_string(e).expect("entries serialize"));
        text.push('\n');
    }
    write_output(&out_path(exp, "grad-check.jsonl"), &text)?;
    Ok(report)
}

pub fn render_grad_check(report: &GradCheckReport) -> String {
    let w = report.entries.iter().map(|e| e.name.len()).max().unwrap_or(9).max(9);
    let mut out = format!("{:<w$}  {:>6}  {:>12}  result\n", "parameter", "size", "max rel err");
    for e in &report.entries {
        let verdict = if e.passed { "ok" } else { "FAIL" };
        out.push_str(&format!("{:<w$}  {:>6}  {:>12.3e}  {verdict}\n", e.name, e.numel, e.max_rel_err));
    }
    out.push_str(&format!(
        "{} scalars, max relative error {:.3e} (tolerance {:.0e}): {}\n",
        report.scalar_count(),
        report.max_rel_err(),
        report.tol,
        if report.passed() { "PASS" } else { "FAIL" }
    ));
    out
}
