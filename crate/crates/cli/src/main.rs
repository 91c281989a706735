mod commands;
mod config;

use std::path::Path;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mhapool::Error;

const AFTER_HELP: &str = "\
Exit codes:
  0  success
  1  internal error
  2  usage error
  3  configuration error
  4  I/O or input data error
  5  checkpoint error
  6  numeric failure (non-finite loss during training)

Environment:
  MHAPOOL_THREADS  worker threads for feature extraction and batches (default 1)";

#[derive(Parser)]
#[command(name = "mhapool", version, about = "Speaker embeddings with self multi-head attention pooling", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-speaker corpus: WAVs, manifests and trials
    Synth(commands::SynthArgs),
    /// Train a speaker classifier and write its best checkpoint
    Train(commands::TrainArgs),
    /// Write one speaker embedding per manifest entry
    Embed(commands::EmbedArgs),
    /// Score trials with cosine similarity and report EER and minDCF
    Eval(commands::EvalArgs),
    /// Dump per-head attention weights for one utterance as CSV
    InspectAttention(commands::InspectArgs),
}

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Index { .. } => 3,
        Error::Io(_)
        | Error::Parse(_)
        | Error::UnsupportedFormat(_)
        | Error::EmptyInput(_)
        | Error::TooShort(_)
        | Error::Lookup(_) => 4,
        Error::Checkpoint(_) => 5,
        Error::NumericFailure { .. } => 6,
        Error::Dimension { .. } | Error::Shape(_) | Error::Metric(_) | Error::DegenerateEmbedding(_) => 1,
    }
}

/// Prefixes I/O errors with the file they concern.
pub fn with_path(path: &Path, err: Error) -> Error {
    match err {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    }
}

fn thread_count() -> mhapool::Result<usize> {
    match std::env::var("MHAPOOL_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("MHAPOOL_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

fn run(cli: Cli) -> mhapool::Result<()> {
    let threads = thread_count()?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))?;
    match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Embed(a) => commands::embed(a),
        Command::Eval(a) => commands::eval(a),
        Command::InspectAttention(a) => commands::inspect_attention(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
