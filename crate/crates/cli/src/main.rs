//! `dhc`: dynamic hosting capacity studies from the command line.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "dhc", version, about = "Fairness-aware dynamic hosting capacity")]
struct Cli {
    /// TOML file with defaults for any of the shared options.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    run: RunConfig,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Dump the compact DistFlow matrices.
    Matrices,
    /// Classify a two-node injection grid with the exact load flow.
    Sweep(SweepArgs),
    /// Hosting-capacity box at nominal demand, both bound variants.
    Hc,
    /// Hosting-capacity boxes over a demand time series.
    Dhc,
    /// Temporal and spatial Jain indices of a DHC series.
    Fairness,
    /// Curtailment, carbon and net-profit curves over capacity increases.
    Economics(EconomicsArgs),
    /// Monte Carlo audit of a hosting-capacity box.
    Validate(ValidateArgs),
    /// Current-envelope error along a single-node injection sweep.
    Mae(MaeArgs),
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Two generation bus ids, `a,b` (default: first two).
    #[arg(long)]
    pub nodes: Option<String>,
    /// Injection range of node a in MW, `min:max`.
    #[arg(long, default_value = "-5:15", allow_hyphen_values = true)]
    pub range_a: String,
    /// Injection range of node b in MW (default: same as a).
    #[arg(long, allow_hyphen_values = true)]
    pub range_b: Option<String>,
    /// Grid points per axis.
    #[arg(long, default_value_t = 81)]
    pub points: usize,
}

#[derive(Debug, Args)]
pub struct EconomicsArgs {
    /// Base energy subtracted from E_new: the minimum over all presets
    /// (`all`) or this scenario's own (`self`).
    #[arg(long, default_value = "all")]
    pub common_base: String,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    /// Tolerated limit excess (squared pu).
    #[arg(long, default_value_t = 1e-6)]
    pub slack: f64,
}

#[derive(Debug, Args)]
pub struct MaeArgs {
    /// Generation bus id receiving the injection (default: first).
    #[arg(long)]
    pub node: Option<u32>,
    /// Injection range in MW, `min:max`.
    #[arg(long, default_value = "-1.2:2", allow_hyphen_values = true)]
    pub range: String,
    #[arg(long, default_value_t = 33)]
    pub points: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let run = || -> anyhow::Result<()> {
        let cfg = match &cli.config {
            Some(path) => cli.run.clone().merged(RunConfig::from_file(path)?),
            None => cli.run.clone(),
        };
        match &cli.command {
            Command::Matrices => commands::matrices(&cfg),
            Command::Sweep(a) => commands::sweep(&cfg, a),
            Command::Hc => commands::hc(&cfg),
            Command::Dhc => commands::dhc(&cfg),
            Command::Fairness => commands::fairness(&cfg),
            Command::Economics(a) => commands::economics(&cfg, a),
            Command::Validate(a) => commands::validate(&cfg, a),
            Command::Mae(a) => commands::mae(&cfg, a),
        }
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
