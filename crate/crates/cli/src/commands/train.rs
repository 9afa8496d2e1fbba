use std::path::PathBuf;

use cirm_core::metrics::render_report_lines;
use cirm_core::model::{checkpoint_to_string, parameter_count};

use crate::config::ExperimentConfig;
use crate::error::Result;

use super::{fit, load_splits, out_path, write_output};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub epochs_file: PathBuf,
    pub best_epoch: Option<usize>,
    pub best_val_f1: Option<f64>,
    pub initial_loss: f64,
    pub param_count: usize,
}

impl TrainSummary {
    pub fn render(&self) -> String {
        let best = match (self.best_epoch, self.best_val_f1) {
            (Some(e), Some(f1)) => format!("best epoch {e} (val macro-F1 {:.2})", f1 * 100.0),
            _ => "no epochs run; checkpoint holds the initialization".into(),
        };
        format!(
            "{} parameters, initial loss {:.5}\n{best}\ncheckpoint: {}\nepoch reports: {}\n",
            self.param_count,
            self.initial_loss,
            self.checkpoint.display(),
            self.epochs_file.display()
        )
    }
}

/// Trains on the train split, selects the epoch with the best validation
/// macro-F1 and writes `checkpoint.jsonl` and `epochs.jsonl`.
pub fn cmd_train(exp: &ExperimentConfig) -> Result<TrainSummary> {
    let splits = load_splits(exp)?;
    let (cfg, outcome) = fit(exp, &exp.model, exp.seed, &splits, "train")?;

    let checkpoint = out_path(exp, "checkpoint.jsonl");
    let epochs_file = out_path(exp, "epochs.jsonl");
    write_output(&checkpoint, &checkpoint_to_string(&cfg, &outcome.best_params))?;
    write_output(&epochs_file, &render_report_lines(&outcome.epochs))?;

    let best_val_f1 = outcome.best_epoch.map(|e| outcome.epochs[e - 1].macro_f1);
    Ok(TrainSummary {
        checkpoint,
        epochs_file,
        best_epoch: outcome.best_epoch,
        best_val_f1,
        initial_loss: outcome.initial_loss,
        param_count: parameter_count(&cfg),
    })
}
