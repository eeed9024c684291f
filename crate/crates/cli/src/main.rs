//! `wonham`: run experiments on partially observed controlled Markov chains
//! from a JSON config.

mod commands;
mod config;
mod controls;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Context;
use config::Loaded;
use error::CliError;

type Runner = fn(&Context) -> Result<u8, CliError>;

/// Environment variable holding the worker thread count.
const THREADS_ENV: &str = "WONHAM_THREADS";

#[derive(Debug, Parser)]
#[command(name = "wonham", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check the model and config and print the bound audit.
    Validate(Args),
    /// Simulate chain and observation paths.
    Simulate(Args),
    /// Run the filter on simulated observations, optionally against the oracle.
    Filter(Args),
    /// Solve the HJB equation and dump the value function and policy.
    SolveHjb(Args),
    /// Verify the HJB feedback against its value and challenger controls.
    Verify(Args),
    /// Check the maximum principle along a control.
    SmpCheck(Args),
}

#[derive(Debug, clap::Args)]
struct Args {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (args, run): (&Args, Runner) = match &cli.command {
        Command::Validate(a) => (a, commands::validate),
        Command::Simulate(a) => (a, commands::simulate),
        Command::Filter(a) => (a, commands::filter),
        Command::SolveHjb(a) => (a, commands::solve),
        Command::Verify(a) => (a, commands::verify),
        Command::SmpCheck(a) => (a, commands::smp_check),
    };
    let mut out_dir = None;
    let result = threads().and_then(|()| {
        let loaded = Loaded::read(&args.config, args.seed)?;
        let out = args
            .out
            .clone()
            .or_else(|| loaded.config.output.as_deref().map(|o| loaded.resolve(o)));
        out_dir.clone_from(&out);
        run(&Context { loaded, out })
    });
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            if let (CliError::Numerical { report, .. }, Some(dir)) = (&e, &out_dir) {
                let text = serde_json::to_string_pretty(report).unwrap_or_default();
                eprintln!("{text}");
                if std::fs::create_dir_all(dir).is_ok() {
                    let _ = std::fs::write(dir.join("error.json"), text + "\n");
                }
            }
            ExitCode::from(e.exit_code())
        }
    }
}

fn threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .map_err(|_| CliError::config(format!("{THREADS_ENV}={value} is not a thread count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::config(format!("{THREADS_ENV}: {e}")))
}
