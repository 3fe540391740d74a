use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedunfold::cli;
use fedunfold::config::ExperimentConfig;

/// Federated learning simulator with trainable per-round aggregation
/// weights.
#[derive(Parser)]
#[command(name = "fedunfold", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split the configured dataset into client shares and emit histograms.
    Partition {
        config: PathBuf,
        /// Override the config master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Learn the per-round aggregation-weight schedule.
    TrainWeights {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run federated training/evaluation with the configured strategy.
    Run {
        config: PathBuf,
        /// Schedule CSV for the duw strategy (overrides the config path).
        #[arg(long)]
        schedule: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Variance/slope/coefficient reports over trained schedules.
    Analyze {
        /// Schedule CSV files, one per round-count grid point.
        #[arg(required = true)]
        schedules: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

/// Output dir precedence: --out-dir flag, then FEDUNFOLD_OUTPUT_DIR, then
/// the config file.
fn resolve_out_dir(flag: Option<PathBuf>) -> Option<PathBuf> {
    flag.or_else(|| std::env::var_os("FEDUNFOLD_OUTPUT_DIR").map(PathBuf::from))
}

fn load(
    config: &Path,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
) -> fedunfold::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(config)?;
    cfg.apply_overrides(seed, resolve_out_dir(out_dir));
    Ok(cfg)
}

fn run() -> fedunfold::Result<()> {
    match Cli::parse().command {
        Command::Partition { config, seed, out_dir } => {
            cli::cmd_partition(&load(&config, seed, out_dir)?)
        }
        Command::TrainWeights { config, seed, out_dir } => {
            cli::cmd_train_weights(&load(&config, seed, out_dir)?)
        }
        Command::Run { config, schedule, seed, out_dir } => {
            cli::cmd_run(&load(&config, seed, out_dir)?, schedule.as_deref())
        }
        Command::Analyze { schedules, out_dir } => cli::cmd_analyze(&schedules, &out_dir),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
