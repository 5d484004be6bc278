//! `tempnorm`: generate toy datasets, score them with any log-probability
//! provider, and evaluate or apply the detection statistics.
//!
//! Every command writes its outputs into an `--out` directory together with
//! a `manifest.json`. A `--config` JSON object, when given, overrides the
//! flags key by key (keys are the flag names in snake_case).

mod commands;
mod manifest;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tempnorm_core::Error;

use crate::commands::{
    DetectArgs, DumpArgs, EvalArgs, GenArgs, OracleArgs, RandomModelArgs, ScanArgs, ScoreArgs, TrainArgs,
};

/// Exit code for a failed oracle suite.
pub const EXIT_ORACLE: u8 = 6;

#[derive(Parser, Debug)]
#[command(name = "tempnorm", version, about = "Detect temperature, top-k and nucleus sampled text")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a smoothed n-gram model on a token corpus.
    Train(TrainArgs),
    /// Draw a random n-gram model.
    RandomModel(RandomModelArgs),
    /// Sample a dataset from a model under a decoding strategy.
    Gen(GenArgs),
    /// Score every sequence of a dataset; writes scores.csv.
    Score(ScoreArgs),
    /// Record provider log-probabilities for later replay.
    Dump(DumpArgs),
    /// Threshold one statistic into per-sequence verdicts.
    Detect(DetectArgs),
    /// Run an experiment config: reports, scores and the tau sweep.
    Eval(EvalArgs),
    /// Check the closed forms against exhaustive enumeration.
    Oracle(OracleArgs),
    /// Look for long runs of top-k tokens in documents.
    Scan(ScanArgs),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidParameter(_)
        | Error::Empty(_)
        | Error::OutOfVocabulary { .. }
        | Error::InvalidDistribution(_)
        | Error::Unscorable { .. }
        | Error::Format(_)
        | Error::Json(_) => 2,
        Error::Capability { .. } => 3,
        Error::Provider { .. } => 4,
        Error::CapExceeded { .. } => 5,
        Error::Io(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::RandomModel(a) => commands::random_model(a),
        Command::Gen(a) => commands::gen(a),
        Command::Score(a) => commands::score(a),
        Command::Dump(a) => commands::dump(a),
        Command::Detect(a) => commands::detect(a),
        Command::Eval(a) => commands::eval(a),
        Command::Oracle(a) => commands::oracle(a),
        Command::Scan(a) => commands::scan(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
