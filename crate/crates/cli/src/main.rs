//! `ufo`: train, evaluate and inspect multi-resolution probabilistic forecasters.

mod analyze;
mod commands;
mod config;
mod error;
mod manifest;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "ufo", version, about = "Probabilistic forecasting with patched neural CDE resampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset, optionally with removed days.
    Synth(commands::SynthArgs),
    /// Train a model and write a checkpoint.
    Train(commands::TrainArgs),
    /// Score a checkpoint on one split against the persistence baseline.
    Evaluate(commands::EvaluateArgs),
    /// Sample forecasts that continue the end of a CSV file.
    Forecast(commands::ForecastArgs),
    /// Diagnostics of data and trained models.
    #[command(subcommand)]
    Analyze(analyze::AnalyzeCommand),
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Forecast(a) => commands::forecast(a),
        Command::Analyze(a) => analyze::run(a),
    }
}

fn main() -> ExitCode {
    // clap reports usage errors itself with exit code 2.
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
