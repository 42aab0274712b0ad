//! `seqmatch`: multi-turn response selection from the command line.
//!
//! Subcommands: `prepare` (vocabulary and embedding artifacts), `train`,
//! `predict` (write a score file, optionally averaging several checkpoints),
//! and `eval` (rank one or more score files against a labeled dataset).
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use config::RunConfig;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "seqmatch",
    version,
    about = "Sequential matching for multi-turn response selection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the vocabulary and combined embedding table from the corpus
    Prepare {
        /// JSON configuration file
        #[arg(long)]
        config: Option<PathBuf>,
        /// key=value settings applied over the file
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train a model from the prepared artifacts
    Train {
        /// JSON configuration file
        #[arg(long)]
        config: Option<PathBuf>,
        /// key=value settings applied over the file
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Score a dataset with one or more checkpoints
    Predict {
        /// JSON configuration file
        #[arg(long)]
        config: Option<PathBuf>,
        /// checkpoint to load; repeat to average several models
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        /// dataset to score (defaults to test_path)
        #[arg(long)]
        data: Option<PathBuf>,
        /// score file to write (defaults to scores_path)
        #[arg(long)]
        out: Option<PathBuf>,
        /// key=value settings applied over the file
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Rank score files against a labeled dataset and report metrics
    Eval {
        /// JSON configuration file
        #[arg(long)]
        config: Option<PathBuf>,
        /// score file to rank; repeat to ensemble several
        #[arg(long = "scores")]
        scores: Vec<PathBuf>,
        /// labeled dataset (defaults to dev_path)
        #[arg(long)]
        data: Option<PathBuf>,
        /// key=value settings applied over the file
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn run(cli: Cli) -> seqmatch_core::Result<()> {
    match cli.command {
        Command::Prepare { config, overrides } => {
            let config = RunConfig::load(config.as_deref(), &overrides)?;
            commands::cmd_prepare(&config)
        }
        Command::Train { config, overrides } => {
            let config = RunConfig::load(config.as_deref(), &overrides)?;
            commands::cmd_train(&config)
        }
        Command::Predict {
            config,
            checkpoints,
            data,
            out,
            overrides,
        } => {
            let config = RunConfig::load(config.as_deref(), &overrides)?;
            commands::cmd_predict(&config, &checkpoints, data.as_deref(), out.as_deref())
        }
        Command::Eval {
            config,
            scores,
            data,
            overrides,
        } => {
            let config = RunConfig::load(config.as_deref(), &overrides)?;
            commands::cmd_eval(&config, &scores, data.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.category().exit_code() as u8)
        }
    }
}
