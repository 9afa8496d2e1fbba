//! Experiment harness for the cross-image reasoning model: data generation,
//! training, evaluation views, ablations, the α sweep, gradient checks and
//! attention dumps.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use cirm_core::metrics::render_table;

use crate::commands::View;
use crate::config::{ExperimentConfig, Overrides};
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "cirm", version, about = "Cross-image reasoning model experiments")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Nested TOML experiment config; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads for batch and cell parallelism.
    #[arg(long, global = true, value_name = "INT")]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// Directory holding train.jsonl, val.jsonl and test.jsonl.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic cross-image contrast corpus.
    GenData {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Train and keep the checkpoint with the best validation macro-F1.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, default_value = "plain")]
        view: View,
    },
    /// Train the full model and every single-component ablation.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        epochs: Option<usize>,
        /// Comma-separated training seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Train one model per α on the grid and export relevance traces.
    SweepAlpha {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Compare every parameter gradient with central differences.
    GradCheck {
        #[arg(long, hide = true, value_name = "PARAM")]
        corrupt_grad: Option<String>,
    },
    /// Export forward traces of selected samples.
    DumpAttention {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Comma-separated record ids.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
    },
}

fn overrides(common: &CommonArgs, data: Option<&DataArgs>, epochs: Option<usize>) -> Overrides {
    Overrides {
        seed: common.seed,
        out: common.out.clone(),
        workers: common.workers,
        data_dir: data.and_then(|d| d.data.clone()),
        epochs,
    }
}

/// Runs one parsed command line and returns the text to print on stdout.
pub fn run(cli: &Cli) -> Result<String> {
    let common = &cli.common;
    let (data, epochs) = match &cli.command {
        Command::Train { data, epochs } | Command::Ablate { data, epochs, .. } | Command::SweepAlpha { data, epochs } => {
            (Some(data), *epochs)
        }
        Command::Eval { data, .. } | Command::DumpAttention { data, .. } => (Some(data), None),
        Command::GenData { .. } | Command::GradCheck { .. } => (None, None),
    };
    let mut exp = ExperimentConfig::resolve(common.config.as_deref(), &overrides(common, data, epochs))?;
    match &cli.command {
        Command::GenData { count, dim } => {
            if let Some(c) = count {
                exp.data.synth.count = *c;
            }
            if let Some(d) = dim {
                exp.data.synth.d = *d;
            }
            exp.validate()?;
        }
        Command::Ablate { seeds, .. } if !seeds.is_empty() => exp.ablate.seeds = seeds.clone(),
        _ => {}
    }
    let pool = cirm_core::train::thread_pool(exp.workers)?;
    pool.install(|| dispatch(&cli.command, &exp))
}

fn dispatch(command: &Command, exp: &ExperimentConfig) -> Result<String> {
    match command {
        Command::GenData { .. } => Ok(commands::cmd_gen_data(exp)?.render()),
        Command::Train { .. } => Ok(commands::cmd_train(exp)?.render()),
        Command::Eval { checkpoint, view, .. } => Ok(render_table(&commands::cmd_eval(exp, checkpoint, *view)?)),
        Command::Ablate { .. } => Ok(commands::render_ablation_table(&commands::cmd_ablate(exp)?)),
        Command::SweepAlpha { .. } => {
            let rows = commands::cmd_sweep_alpha(exp)?;
            let reports: Vec<_> = rows.into_iter().map(|r| r.report).collect();
            Ok(render_table(&reports))
        }
        Command::GradCheck { corrupt_grad } => {
            let report = commands::cmd_grad_check(exp, corrupt_grad.as_deref())?;
            let text = commands::render_grad_check(&report);
            if report.passed() {
                Ok(text)
            } else {
                print!("{text}");
                Err(CliError::CheckFailed(report.failures().map(|e| e.name.clone()).collect()))
            }
        }
        Command::DumpAttention { checkpoint, split, ids, .. } => {
            let traces = commands::cmd_dump_attention(exp, checkpoint, split, ids)?;
            Ok(format!(
                "{} traces written to {}\n",
                traces.len(),
                exp.out.join("attention.jsonl").display()
            ))
        }
    }
}
