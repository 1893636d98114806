//! `battsynth`: train battery forecasters, compare them across horizons and
//! emit synthetic datasets.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Config, Overrides};
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "battsynth", version, about = "Synthetic battery time series from deep forecasters")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, Subcommand)]
enum Command {
    /// Load and validate a battery CSV and summarize its columns.
    Ingest,
    /// Train the configured model and write a checkpoint plus reports.
    Train,
    /// Evaluate a checkpoint on the test split.
    Evaluate,
    /// Sweep every configured model over the horizon grid and rank them.
    Compare,
    /// Generate synthetic tables from a checkpoint and report their fidelity.
    Synthesize,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
    };
    let cfg = Config::load(cli.config.as_deref(), &overrides)?;
    cfg.write_snapshot()?;
    match cli.command {
        Command::Ingest => commands::ingest(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Evaluate => commands::evaluate_cmd(&cfg),
        Command::Compare => commands::compare(&cfg),
        Command::Synthesize => commands::synthesize(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
