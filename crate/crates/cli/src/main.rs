//! `tasksr`: prepare datasets, train, evaluate and plot task-driven SR runs.

mod draw;
mod eval;
mod plot;
mod prepare;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tasksr::eval::IouMode;

/// Exit status for invalid arguments or configuration.
const EXIT_USAGE: u8 = 2;
/// Exit status when some work failed.
const EXIT_FAILURE: u8 = 1;

#[derive(Parser)]
#[command(name = "tasksr", version, about = "Task-driven super-resolution for document images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment or matrix file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Replaces the top-level seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Replaces the output directory of the config.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Split, degrade and tile a dataset; write the manifest and patch files.
    Prepare {
        #[command(flatten)]
        common: Common,
    },
    /// Train one experiment, or every row of a matrix file.
    Train {
        #[command(flatten)]
        common: Common,
        /// Matrix rows run in parallel (matrix files only).
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Evaluate trained checkpoints on the test split and write the report.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate instead of the run's final.ckpt (single experiments only).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Name of the report files; defaults to the dataset directory name.
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long, default_value = "mask")]
        iou_mode: IouMode,
        /// Score the HR images against themselves (pipeline check).
        #[arg(long)]
        identity_bypass: bool,
    },
    /// Draw loss and DWA weight curves from a run's metrics.csv.
    Plot {
        /// Path to metrics.csv.
        metrics: PathBuf,
        /// Directory for curves.png and curves.csv; defaults to the CSV's directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train every row of a matrix file.
    Matrix {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

/// How a command ended.
pub enum Outcome {
    Ok,
    /// Some items failed; each is listed on stderr.
    Partial(Vec<String>),
}

pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<tasksr::Error> for CliError {
    fn from(e: tasksr::Error) -> Self {
        match e {
            tasksr::Error::Config { .. } | tasksr::Error::Decode { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare { common } => prepare::run(&common),
        Command::Train { common, jobs } => train::run(&common, jobs),
        Command::Matrix { common, jobs } => train::run_matrix_only(&common, jobs),
        Command::Eval { common, checkpoint, dataset, iou_mode, identity_bypass } => {
            eval::run(&common, checkpoint, dataset, iou_mode, identity_bypass)
        }
        Command::Plot { metrics, output } => plot::run(&metrics, output.as_deref()),
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Partial(failures)) => {
            eprintln!("{} item(s) failed:", failures.len());
            for f in failures {
                eprintln!("  {f}");
            }
            ExitCode::from(EXIT_FAILURE)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}
