//! `rehearsal`: synthesize, train, evaluate, analyze and intervene.
//!
//! Exit codes: 0 success, 1 usage or configuration, 2 data, IO or
//! checkpoint, 3 numeric failure.

mod commands;
mod config;
mod corpus;
mod manifest;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rehearsal_core::Error;

/// Invalid arguments or configuration.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser, Debug)]
#[command(
    name = "rehearsal",
    version,
    about = "Ego-biased rehearsal trajectory forecasting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic corpus of ETH-UCY style scene files.
    Synth(commands::SynthArgs),
    /// Train both predictors; writes a checkpoint, a JSON-lines log and a manifest.
    Train(commands::TrainArgs),
    /// Best-of-K minADE / minFDE of a checkpoint.
    Eval(commands::EvalArgs),
    /// Export activation rates or insight summaries as CSV.
    Analyze(commands::AnalyzeArgs),
    /// Kernel intervention, then the chained rehearsal intervention.
    Intervene(commands::IntervenArgs),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => 1,
                Error::Numeric(_) | Error::Contract(_) => 3,
                _ => 2,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 2;
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train_cmd(a),
        Command::Eval(a) => commands::eval(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Intervene(a) => commands::intervene(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
