//! `ibg`: data generation, two-phase training, explanations, faithfulness
//! evaluation, dimension analysis, sweeps and SVG reports.

mod commands;
mod config;
mod error;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use ibg_core::attribution::Method;
use ibg_core::data::Split;

use crate::config::{Phase, RunConfig, SweepAxis};
use crate::error::CliError;

#[derive(Parser)]
#[command(
    name = "ibg",
    version,
    about = "Information-bottleneck gradient explanations for aspect sentiment"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration (a previous config.lock.json works).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "IBG_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    /// Override any config field, e.g. `--set model.high_dim=32`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Corpus JSONL to read.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Checkpoint to read.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        noise_rate: Option<f64>,
    },
    /// Train a base model or add and train the bottleneck layer.
    Train {
        #[arg(long, value_enum)]
        phase: Option<Phase>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        low_dim: Option<usize>,
    },
    /// Write per-example token scores as JSON lines.
    Explain {
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        split: Option<Split>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// AOPC, post-hoc accuracy and opinion-word recovery.
    EvalFaithfulness {
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        split: Option<Split>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Per-dimension importance, top-k masking and dimension frequency.
    AnalyzeDims {
        #[arg(long)]
        split: Option<Split>,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Evaluate across values of alpha, beta or low_dim.
    Sweep {
        #[arg(long, value_enum)]
        axis: Option<SweepAxis>,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        #[arg(long)]
        split: Option<Split>,
    },
    /// Render SVG charts from the CSVs in the output directory.
    Report,
}

fn push<T: serde::Serialize>(flags: &mut Vec<(&'static str, Value)>, key: &'static str, v: Option<T>) {
    if let Some(v) = v {
        flags.push((key, json!(v)));
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut flags = Vec::new();
    push(&mut flags, "output_dir", cli.common.output_dir);
    push(&mut flags, "corpus", cli.common.corpus);
    push(&mut flags, "checkpoint", cli.common.checkpoint);
    match &cli.command {
        Command::GenData { seed, size, noise_rate } => {
            push(&mut flags, "generator.seed", *seed);
            push(&mut flags, "generator.size", *size);
            push(&mut flags, "generator.noise_rate", *noise_rate);
        }
        Command::Train {
            phase,
            epochs,
            beta,
            low_dim,
        } => {
            push(&mut flags, "phase", *phase);
            push(&mut flags, "train.epochs", *epochs);
            push(&mut flags, "model.beta", *beta);
            push(&mut flags, "model.low_dim", *low_dim);
        }
        Command::Explain {
            method,
            split,
            alpha,
            top_k,
        } => {
            push(&mut flags, "method", *method);
            push(&mut flags, "split", *split);
            push(&mut flags, "attribution.alpha", *alpha);
            push(&mut flags, "top_k", *top_k);
        }
        Command::EvalFaithfulness { method, split, alpha } => {
            push(&mut flags, "method", *method);
            push(&mut flags, "split", *split);
            push(&mut flags, "attribution.alpha", *alpha);
        }
        Command::AnalyzeDims { split, top_k } => {
            push(&mut flags, "split", *split);
            push(&mut flags, "dims.top_k", *top_k);
        }
        Command::Sweep { axis, values, split } => {
            push(&mut flags, "sweep.axis", *axis);
            push(&mut flags, "sweep.values", values.clone());
            push(&mut flags, "split", *split);
        }
        Command::Report => {}
    }
    let config: RunConfig = config::resolve(cli.common.config.as_deref(), &cli.common.sets, flags)?;
    std::fs::create_dir_all(&config.output_dir).map_err(|e| CliError::io(e, &config.output_dir))?;
    match cli.command {
        Command::GenData { .. } => commands::gen_data(&config),
        Command::Train { .. } => commands::train(&config),
        Command::Explain { .. } => commands::explain(&config),
        Command::EvalFaithfulness { .. } => commands::eval_faithfulness(&config),
        Command::AnalyzeDims { .. } => commands::analyze_dims(&config),
        Command::Sweep { .. } => commands::sweep(&config),
        Command::Report => commands::report(&config),
    }?;
    config.write_lock()
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.category.exit_code())
        }
    }
}
