//! `netcbf`: batch synthesis, simulation and contingency runs from a
//! scenario file.

// NaN-aware comparisons are written as negated orderings.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod error;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::Scenario;
use error::{CliError, USAGE};

#[derive(Debug, Parser)]
#[command(name = "netcbf", version, about = "Compositional safety synthesis and simulation for power networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-bus robust invariant sets at the full coupling budget.
    Rci(Args),
    /// Sampled epigraphs and the network contract.
    Contract(Args),
    /// Supervised simulation with STL verdicts.
    Simulate(Args),
    /// Contingency plan, tracked simulation and tube verdicts.
    Mpc(Args),
}

#[derive(Debug, clap::Args)]
struct Args {
    /// Scenario file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for per-bus synthesis.
    #[arg(long)]
    jobs: Option<usize>,
}

type Handler = fn(&Scenario, &Path) -> Result<(), CliError>;

fn run(command: Command) -> Result<(), CliError> {
    let (args, f): (Args, Handler) = match command {
        Command::Rci(a) => (a, commands::rci),
        Command::Contract(a) => (a, commands::contract),
        Command::Simulate(a) => (a, commands::simulate),
        Command::Mpc(a) => (a, commands::mpc),
    };
    if let Some(jobs) = args.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| CliError { code: USAGE, msg: format!("--jobs: {e}") })?;
    }
    let scenario = Scenario::load(&args.config, args.seed)?;
    std::fs::create_dir_all(&args.out)?;
    f(&scenario, &args.out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code as u8)
        }
    }
}
