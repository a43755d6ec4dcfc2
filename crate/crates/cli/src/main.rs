//! `structprop` command-line harness: `run`, `tune` and `synth`.

mod output;
mod run;
mod synth;
mod tune;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Seed used when `--seed` is not given.
pub const DEFAULT_SEED: u64 = 20_170_417;

#[derive(Parser)]
#[command(name = "structprop", version, about = "Structure propagation for transductive zero-shot classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model on a dataset directory and label its test rows.
    Run(run::RunArgs),
    /// Select hyperparameters by cross-validation over the seen classes.
    Tune(tune::TuneArgs),
    /// Write a seeded synthetic dataset.
    Synth(synth::SynthArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run::run(args),
        Command::Tune(args) => tune::run(args),
        Command::Synth(args) => synth::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Parses `name=value`.
pub fn parse_assignment(s: &str) -> Result<(String, f64), String> {
    let (name, value) = s
        .split_once('=')
        .ok_or_else(|| format!("expected NAME=VALUE, got {s:?}"))?;
    let value = value
        .parse()
        .map_err(|_| format!("not a number in {s:?}"))?;
    Ok((name.trim().to_string(), value))
}
