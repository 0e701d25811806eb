//! `dynts` — file-based pipeline over the dynts laboratory.
//!
//! ```text
//! dynts gen       --config run.cfg          # dataset.jsonl + manifest.json
//! dynts trace     --config run.cfg          # traces/, scores.csv, samples.jsonl
//! dynts train     --config run.cfg          # checkpoint.json + history.csv
//! dynts infer     --config run.cfg --policy dynts
//! dynts retention --config run.cfg          # retention.csv
//! dynts report    --out run                 # report/ + report.md
//! ```

mod commands;
mod config;
mod report;

use anyhow::Result;
use clap::{Parser, Subcommand};
use config::RunConfig;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "dynts", version, about = "Dynamic thinking-token selection laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory (overrides `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Eviction policy for `infer` (overrides `policy`).
    #[arg(long, global = true)]
    policy: Option<String>,
    /// Predictor checkpoint for `infer` (defaults to `<out>/checkpoint.json`).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate the synthetic dataset.
    Gen,
    /// Teacher-force every instance and score its tokens.
    Trace,
    /// Train the importance predictor on the traced samples.
    Train,
    /// Decode every instance under a cache policy.
    Infer,
    /// Answer from top/bottom/random subsets of the think tokens.
    Retention,
    /// Consolidate run outputs and check them against the acceptance criteria.
    Report,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(policy) = &cli.policy {
        cfg.policy = policy.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = load_config(cli)?;
    match cli.command {
        Command::Gen => commands::gen(&cfg).map(|_| true),
        Command::Trace => commands::trace(&cfg).map(|_| true),
        Command::Train => commands::train(&cfg).map(|_| true),
        Command::Infer => commands::infer(&cfg, cli.checkpoint.as_deref()).map(|_| true),
        Command::Retention => commands::retention(&cfg).map(|_| true),
        Command::Report => report::report(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: at least one acceptance check failed (see report.md)");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
