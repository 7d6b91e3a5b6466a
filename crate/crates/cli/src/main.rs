//! `piano`: train, evaluate, diagnose and ablate physics-informed
//! autoregressive PDE solvers.
//!
//! Exit codes: 0 success, 1 usage or invalid input, 2 training diverged,
//! 3 file I/O failure.

mod commands;
mod io;
mod options;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use thiserror::Error;

use options::{Cli, Command};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("training diverged at iteration {iteration} (last finite loss {last_finite_loss:?})")]
    Diverged {
        iteration: usize,
        last_finite_loss: Option<f64>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Runtime(_) => 1,
            CliError::Diverged { .. } => 2,
            CliError::Io { .. } | CliError::Format { .. } => 3,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => commands::cmd_train(a.resolve()?),
        Command::Eval(a) => commands::cmd_eval(a.resolve()?),
        Command::Diagnose(a) => commands::cmd_diagnose(a.resolve()?),
        Command::Ablate(a) => commands::cmd_ablate(a.resolve()?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
