//! `freqcal`: fit source forecasters, run test-time calibration under the
//! rolling protocols, audit batch plans for leakage, count adapter
//! parameters and draw diagnostics from saved traces.
//!
//! Exit status is 0 on success, 1 on a runtime failure and 2 on a usage or
//! configuration error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use freqcal_core::AdapterKind;

use config::ConfigArgs;

/// A problem with the command line, config file or input paths.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "freqcal", version, about = "Test-time frequency calibration of frozen forecasters")]
struct Cli {
    /// Log progress to stderr (repeat for more detail)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the source forecaster on the train split and save it
    Train(ConfigArgs),
    /// Run the configured protocol over the test split
    Run(ConfigArgs),
    /// Check the induced batch plan for supervision leakage
    Audit(ConfigArgs),
    /// Print the number of trainable adapter parameters
    Params {
        #[arg(long)]
        channels: usize,
        #[arg(long, default_value_t = 96)]
        lookback: usize,
        #[arg(long)]
        horizon: usize,
        #[arg(long, default_value = "fac")]
        adapter: AdapterKind,
        #[arg(long)]
        no_input_calibration: bool,
    },
    /// Correction spectra and early-vs-late curves from saved traces
    Diagnose {
        /// Binary trace written by `run` (repeatable)
        #[arg(long = "trace", value_name = "FILE", required = true)]
        traces: Vec<PathBuf>,
        #[arg(long, value_name = "DIR", default_value = "diagnostics")]
        out: PathBuf,
        /// Batch size for the early-vs-late curves (default: the trace's first batch)
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Run several config files, each in its own process
    Sweep {
        #[arg(value_name = "CONFIG", required = true)]
        configs: Vec<PathBuf>,
        /// Maximum concurrent runs
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, value_name = "DIR", default_value = "sweep")]
        out: PathBuf,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<freqcal_core::Error>() {
        Some(freqcal_core::Error::Config(_) | freqcal_core::Error::TooShort { .. }) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Train(args) => commands::train(&args),
        Command::Run(args) => commands::run(&args),
        Command::Audit(args) => commands::audit(&args),
        Command::Params {
            channels,
            lookback,
            horizon,
            adapter,
            no_input_calibration,
        } => commands::params(adapter, channels, lookback, horizon, !no_input_calibration),
        Command::Diagnose { traces, out, batch_size } => commands::diagnose(&traces, &out, batch_size),
        Command::Sweep { configs, jobs, out } => commands::sweep(&configs, jobs, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
