//! CLI surface: argument parsing and dispatch. The heavy lifting lives in
//! [`commands`]; tests call those functions directly.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use config::RunConfig;
use koopman_mpc::Result;

#[derive(Debug, Parser)]
#[command(
    name = "kmpc",
    about = "Adaptive Koopman MPC: ingestion, fitting, advisor replay, closed-loop runs, reporting"
)]
pub struct Cli {
    /// Path to a TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the configuration's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Align and clean raw batch files into batch logs.
    Ingest {
        raw_dir: PathBuf,
        out_dir: PathBuf,
    },
    /// Batch-fit a lifted model over cleaned batches.
    Fit {
        cleaned_dir: PathBuf,
        model_out: PathBuf,
    },
    /// Replay a cleaned batch in advisor mode.
    Advise {
        batch_file: PathBuf,
        model_file: PathBuf,
        out_dir: PathBuf,
    },
    /// Closed-loop run on a synthetic plant (linear | bilinear | drifting).
    Closedloop {
        plant: String,
        out_dir: PathBuf,
        /// Force adaptation on/off, overriding the configuration.
        #[arg(long)]
        adaptation: Option<bool>,
    },
    /// Aggregate advisor summaries into the Cpk comparison report.
    Report {
        summaries_dir: PathBuf,
        out_dir: PathBuf,
    },
}

/// Loads the configuration and dispatches. Returns the library error for
/// exit-code mapping by the binary.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let seed = cli.seed.unwrap_or(cfg.seed);
    match &cli.command {
        Command::Ingest { raw_dir, out_dir } => commands::cmd_ingest(raw_dir, out_dir, &cfg),
        Command::Fit {
            cleaned_dir,
            model_out,
        } => commands::cmd_fit(cleaned_dir, model_out, &cfg),
        Command::Advise {
            batch_file,
            model_file,
            out_dir,
        } => commands::cmd_advise(batch_file, model_file, out_dir, &cfg),
        Command::Closedloop {
            plant,
            out_dir,
            adaptation,
        } => commands::cmd_closedloop(plant, seed, out_dir, &cfg, *adaptation),
        Command::Report {
            summaries_dir,
            out_dir,
        } => commands::cmd_report(summaries_dir, out_dir, &cfg),
    }
}
