//! `saaformer`: synthetic scenes, splits, training, evaluation, leakage
//! audits and classification maps.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3
//! constraint violation. Every failure prints one line to stderr:
//!
//! ```text
//! saaformer: error[<kind>]: <message>
//! ```

mod commands;
mod manifest;
mod ppm;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{AuditArgs, EvalArgs, GenArgs, MapArgs, ReplayArgs, SplitArgs, TrainArgs};

#[derive(Debug, Parser)]
#[command(name = "saaformer", version, about = "Hyperspectral patch classification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a tiled synthetic scene (.hsic with labels).
    Gen(GenArgs),
    /// Split labeled pixels into train and test centers.
    Split(SplitArgs),
    /// Train a classifier and write a checkpoint plus loss trace.
    Train(TrainArgs),
    /// Score a checkpoint on the test centers of a split.
    Eval(EvalArgs),
    /// Histogram of test-window overlap with the training windows.
    Audit(AuditArgs),
    /// Write a classification map as binary PPM.
    Map(MapArgs),
    /// Re-run a command from its manifest.
    Replay(ReplayArgs),
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub kind: String,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            kind: "usage".into(),
            message: message.into(),
        }
    }

    pub fn data(kind: &str, message: impl Into<String>) -> Self {
        Self {
            code: 2,
            kind: kind.into(),
            message: message.into(),
        }
    }
}

impl From<saaformer::Error> for Failure {
    fn from(e: saaformer::Error) -> Self {
        use saaformer::Error as E;
        let code = if e.is_constraint_violation() {
            3
        } else if matches!(e, E::Config(_) | E::InvalidArgument(_)) {
            1
        } else {
            2
        };
        Self {
            code,
            kind: e.kind().into(),
            message: e.to_string(),
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Gen(a) => commands::gen(&a),
        Command::Split(a) => commands::split(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Audit(a) => commands::audit(&a),
        Command::Map(a) => commands::map(&a),
        Command::Replay(a) => commands::replay(&a),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("saaformer: error[usage]: {}", one_line(first.trim_start_matches("error: ")));
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("saaformer: error[{}]: {}", f.kind, one_line(&f.message));
            ExitCode::from(f.code)
        }
    }
}
