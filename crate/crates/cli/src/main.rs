//! `hdnet`: data generation, training, evaluation, gradient audits and ablations.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hdnet_autodiff::AutodiffError;
use hdnet_core::CoreError;

/// Exit status for a successful run.
pub const EXIT_OK: u8 = 0;
/// Any failure not covered below.
pub const EXIT_OTHER: u8 = 1;
/// Invalid config file, flag or environment value.
pub const EXIT_CONFIG: u8 = 2;
/// Missing, inconsistent or unwritable data and checkpoints.
pub const EXIT_DATA: u8 = 3;
/// Non-finite loss or a failed gradient check.
pub const EXIT_NUMERICAL: u8 = 4;

/// Worker-pool size for generation and evaluation.
pub const WORKERS_ENV: &str = "HDNET_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "hdnet", version, about = "Root-depth estimation experiments on synthetic multi-person scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides the seed of the command.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic split and write it to disk.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Split name; `train` and `val` take their count and seed from the config.
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        count: Option<usize>,
        /// Replace an existing non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model; writes checkpoints, a CSV log and loss plots.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training split directory (generated in memory when absent).
        #[arg(long)]
        train_data: Option<PathBuf>,
        #[arg(long)]
        val_data: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed steps (the schedule is unchanged).
        #[arg(long)]
        stop_at: Option<u64>,
        /// Overwrite the log of an earlier run in the output directory.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate predictions on a split and print or write a metric table.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Split directory; the config's validation split when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluate a predictions JSON-lines file instead of running a model.
        #[arg(long, conflicts_with = "checkpoint")]
        predictions: Option<PathBuf>,
        /// Evaluate the ground truth itself as predictions.
        #[arg(long, conflicts_with_all = ["checkpoint", "predictions"])]
        oracle: bool,
        /// Also write the evaluated predictions as JSON lines.
        #[arg(long)]
        save_predictions: Option<PathBuf>,
        /// Metric columns or families (e.g. `mrpe,ap`); all when absent.
        #[arg(long, value_delimiter = ',')]
        metrics: Vec<String>,
        /// Row label; defaults to the model variant.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Finite-difference audit of every primitive and of the full objective.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Number of consecutive seeds to audit.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Corrupt the backward rule of one operation (negative control).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Train and evaluate every model variant over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Variants to run; all five when absent.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[arg(long)]
        train_data: Option<PathBuf>,
        #[arg(long)]
        val_data: Option<PathBuf>,
        /// Steps per run, overriding the config.
        #[arg(long)]
        steps: Option<u64>,
    },
}

/// A gradient audit found at least one failing check.
#[derive(Debug)]
pub struct GradCheckFailed {
    pub failed: usize,
    pub worst: f64,
}

impl std::fmt::Display for GradCheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} gradient checks failed (worst relative error {:.3e})", self.failed, self.worst)
    }
}

impl std::error::Error for GradCheckFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<GradCheckFailed>() {
            return EXIT_NUMERICAL;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Config(_) => EXIT_CONFIG,
                CoreError::NonFiniteLoss { .. } | CoreError::Autodiff(AutodiffError::NonFinite { .. }) => EXIT_NUMERICAL,
                CoreError::Data(_)
                | CoreError::Io { .. }
                | CoreError::Checkpoint(_)
                | CoreError::Skeleton(_)
                | CoreError::Placement { .. }
                | CoreError::EmptyCrop => EXIT_DATA,
                _ => EXIT_OTHER,
            };
        }
    }
    EXIT_OTHER
}

fn init_workers() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n = raw
        .trim()
        .parse::<usize>()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CoreError::Config(format!("{WORKERS_ENV}={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_workers()?;
    match cli.command {
        Command::GenData {
            common,
            split,
            count,
            force,
        } => commands::gen_data(&common, &split, count, force),
        Command::Train {
            common,
            train_data,
            val_data,
            resume,
            stop_at,
            force,
        } => commands::train(&common, train_data, val_data, resume.as_deref(), stop_at, force),
        Command::Eval {
            common,
            checkpoint,
            data,
            predictions,
            oracle,
            save_predictions,
            metrics,
            variant,
        } => commands::eval(
            &common,
            commands::EvalSource::new(checkpoint, predictions, oracle),
            data.as_deref(),
            save_predictions.as_deref(),
            &metrics,
            variant,
        ),
        Command::GradCheck {
            common,
            seeds,
            tolerance,
            inject_fault,
        } => commands::grad_check(&common, seeds, tolerance, inject_fault.as_deref()),
        Command::Ablate {
            common,
            variants,
            train_data,
            val_data,
            steps,
        } => commands::ablate(&common, &variants, train_data, val_data, steps),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
