//! `adaptkan` command-line tool.
//!
//! Exit codes: 0 success, 1 numerical failure, 2 configuration or input
//! error, 3 I/O error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use adaptkan::KanError;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "adaptkan", version, about = "Adaptive-domain KAN training, OOD scoring and CLF tools")]
pub struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for output files.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a regression model from a config; writes model.json and metrics.csv.
    Train,
    /// Evaluate a saved model on a CSV dataset and print its RMSE.
    Eval(EvalArgs),
    /// Histogram-based OOD scoring.
    #[command(subcommand)]
    Ood(OodCommand),
    /// Control Lyapunov function tools.
    #[command(subcommand)]
    Clf(ClfCommand),
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// CSV with a header; the last `--targets` columns are targets.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub targets: usize,
    /// Also write predictions to this file inside the output directory.
    #[arg(long)]
    pub predictions: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum OodCommand {
    /// Fit per-feature histograms; writes scorer.json.
    Fit {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        bins: Option<usize>,
        /// Weight of the max-softmax term; enables MSP fusion.
        #[arg(long)]
        msp_lambda: Option<f64>,
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Score every row of a features file; writes scores.csv.
    Score {
        #[arg(long)]
        scorer: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Per-row logits for MSP fusion.
        #[arg(long)]
        logits: Option<PathBuf>,
        #[arg(long, default_value = "scores.csv")]
        out: String,
    },
    /// AUROC of in-distribution against OOD scores.
    Auroc {
        #[arg(long)]
        id: PathBuf,
        #[arg(long)]
        ood: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
pub enum ClfCommand {
    /// Train a network candidate; writes clf_model.json and clf_loss.csv.
    Train,
    /// Closed-loop simulation from uniform starts; writes report.csv.
    Simulate {
        /// Use the closed-form candidate instead of a model.
        #[arg(long, conflicts_with = "model")]
        analytical: bool,
        #[arg(long, required_unless_present = "analytical")]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        trajectories: usize,
        /// Starts are pooled from this many seeds, starting at --seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = 3.0)]
        radius: f64,
        #[arg(long, default_value_t = 0.01)]
        dt: f64,
        #[arg(long, default_value_t = 10.0)]
        horizon: f64,
        /// Also write every trajectory to paths.csv.
        #[arg(long)]
        paths: bool,
        #[arg(long, default_value = "report.csv")]
        out: String,
    },
    /// Conformal bound or confidence from a report.
    Conformal {
        #[arg(long)]
        report: PathBuf,
        /// Error bound whose confidence is printed.
        #[arg(long = "C", alias = "c", conflicts_with = "delta")]
        c: Option<f64>,
        /// Failure probability whose distance bound is printed.
        #[arg(long, required_unless_present = "c")]
        delta: Option<f64>,
    },
}

fn exit_code(e: &KanError) -> u8 {
    if e.is_io() {
        3
    } else if e.is_numerical() {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
