//! Command-line front end for training, debiasing, and evaluating
//! multi-level hierarchical classifiers over precomputed feature vectors.
//!
//! Results go to files in the chosen output directory; logs go to stderr
//! (`RUST_LOG=info` for progress lines). Exit codes: 0 success, 2 usage or
//! configuration error, 3 data/format/shape error, 4 numerical failure.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use dttc_core::Error;

#[derive(Parser, Debug)]
#[command(
    name = "dttc",
    version,
    about = "Multi-level hierarchical classification with transitional masking and dynamic fairness reweighting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded synthetic dataset, optionally split train/test.
    Generate(commands::GenerateArgs),
    /// Train one variant; writes checkpoint, report.jsonl, config.resolved.
    Train(commands::TrainArgs),
    /// Evaluate a checkpoint; writes metrics.json and metrics.csv.
    Eval(commands::EvalArgs),
    /// Predict class paths and per-level probabilities for a feature file.
    Predict(commands::PredictArgs),
    /// Train and evaluate all four variants; writes a comparison table.
    Ablation(commands::AblationArgs),
    /// Print structure and validation results for a taxonomy file.
    Inspect(commands::InspectArgs),
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::NonFinite(_) => 4,
        _ => 3,
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(args) => commands::generate(args),
        Command::Train(args) => commands::train(args),
        Command::Eval(args) => commands::eval(args),
        Command::Predict(args) => commands::predict(args),
        Command::Ablation(args) => commands::ablation(args),
        Command::Inspect(args) => commands::inspect(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        let mut source = std::error::Error::source(&e);
        while let Some(inner) = source {
            eprintln!("  caused by: {inner}");
            source = inner.source();
        }
        std::process::exit(exit_code(&e));
    }
}
