//! `odenorm`: train, evaluate and diagnose neural-ODE classifiers.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use odenorm_cli::commands::{self, exit_code, Overrides};

#[derive(Debug, Parser)]
#[command(name = "odenorm", version, about = "Neural-ODE normalization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes checkpoints and metrics.csv into --out.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print test accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate a checkpoint across the solver grid and print the verdict.
    Criterion {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Evaluate grid points on ODENORM_THREADS workers.
        #[arg(long)]
        parallel: bool,
    },
    /// Train and diagnose every sweep variant; writes summary.csv into --out.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        parallel: bool,
    },
}

/// Config file plus scalar overrides.
#[derive(Debug, Clone, Args)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Training solver, e.g. `Euler:8`.
    #[arg(long)]
    solver: Option<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

impl From<Common> for Overrides {
    fn from(c: Common) -> Self {
        Overrides {
            config: c.config,
            epochs: c.epochs,
            seed: c.seed,
            lr: c.lr,
            batch_size: c.batch_size,
            solver: c.solver,
            data_dir: c.data_dir,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train { common, out } => commands::train(&common.into(), &out),
        Command::Eval { common, checkpoint } => commands::eval(&common.into(), &checkpoint),
        Command::Criterion {
            common,
            checkpoint,
            out,
            parallel,
        } => commands::criterion(&common.into(), &checkpoint, &out, parallel),
        Command::Sweep { common, out, parallel } => commands::sweep(&common.into(), &out, parallel),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
