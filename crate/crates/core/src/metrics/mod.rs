//! Classification metrics, inter-rater agreement and Wilson intervals.

pub mod agreement;
pub mod classification;
pub mod report;
pub mod wilson;

pub use agreement::{cohens_kappa, kappa_from_table};
pub use classification::{per_class_scores, ClassScores, Confusion};
pub use report::{
    macro_metrics, parse_report_line, parse_report_lines, render_report, render_report_lines, render_table,
    report_from_confusion, MetricsReport, ReportFormat,
};
pub use wilson::{wilson_interval, Z_95};
