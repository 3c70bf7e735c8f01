//! `uqc`: train, compress, decompress, evaluate and diagnose the
//! universal-quantization codec.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod commands;
mod util;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "uqc", version, about = "Universal-quantization image codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a linear block-transform model on a folder of images.
    Train(commands::train::TrainArgs),
    /// Compress a PNG/JPEG image to a .uqc bitstream.
    Compress(commands::codecs::CompressArgs),
    /// Decompress a .uqc bitstream back to a PNG.
    Decompress(commands::codecs::DecompressArgs),
    /// Evaluate a model over a dataset; one CSV row per (image, mode).
    Eval(commands::eval::EvalArgs),
    /// Rate-distortion sweep across several trained models.
    Sweep(commands::eval::SweepArgs),
    /// Channel and gradient diagnostics.
    Diag(commands::diag::DiagArgs),
}

/// Failures split by exit code.
pub enum CliError {
    /// Bad invocation: missing inputs, malformed flag values. Exit 2.
    Usage(String),
    /// Legitimate invocation that failed at runtime. Exit 1.
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

pub type CliResult = Result<(), CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Path that must already exist; anything else is a usage error.
fn existing(path: &PathBuf, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{what} not found: {}", path.display())))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => commands::train::run(args),
        Command::Compress(args) => commands::codecs::compress(args),
        Command::Decompress(args) => commands::codecs::decompress(args),
        Command::Eval(args) => commands::eval::eval(args),
        Command::Sweep(args) => commands::eval::sweep(args),
        Command::Diag(args) => commands::diag::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
