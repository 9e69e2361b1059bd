//! `revq`: train models, encode and decode WAV files, score them, and run
//! the structural experiments.
//!
//! Exit status is 0 on success, 2 for usage errors (bad flags, missing
//! input files, invalid configuration) and 1 for failures while running.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "revq", version, about = "Residual experts vector quantization codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model on one or more WAV files.
    Train(TrainArgs),
    /// Encode a WAV file into an RVQ1 stream.
    Encode(EncodeArgs),
    /// Decode an RVQ1 stream into a WAV file.
    Decode(DecodeArgs),
    /// Compare a degraded WAV against a reference.
    Eval(EvalArgs),
    /// Fixed-prefix versus oracle versus routed expert selection.
    ExpAdaptive(ExpArgs),
    /// Expert usage as the pool grows.
    ExpUtilization(ExpArgs),
    /// Rate and distortion over every k_r with one frozen model.
    ExpVbr(ExpArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training WAV file; repeat for several.
    #[arg(long, required = true)]
    input: Vec<PathBuf>,
    /// Where to write the model.
    #[arg(long)]
    output: PathBuf,
    /// key=value file with model and training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = revq::frontend::DEFAULT_BLOCK_SIZE)]
    block_size: usize,
    #[arg(long)]
    frames_per_window: Option<usize>,
    /// Per-step training history.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EncodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Experts per window; defaults to the whole pool.
    #[arg(long)]
    k_r: Option<usize>,
    /// Defaults to the model dimension.
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long, default_value_t = 16)]
    frames_per_window: usize,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Original WAV.
    #[arg(long)]
    reference: PathBuf,
    /// Decoded WAV.
    #[arg(long)]
    input: PathBuf,
    /// Stream the decoded WAV came from, for a bitrate breakdown.
    #[arg(long)]
    stream: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExpArgs {
    /// key=value file with dataset, model and training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use this model instead of training one (adaptive and VBR only).
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    k_r: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sample block length that one frame stands for, for bitrates.
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long)]
    frames_per_window: Option<usize>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<revq::Error> for CliError {
    fn from(e: revq::Error) -> Self {
        match e {
            revq::Error::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Encode(a) => commands::encode(a),
        Command::Decode(a) => commands::decode(a),
        Command::Eval(a) => commands::eval(a),
        Command::ExpAdaptive(a) => commands::exp_adaptive(a),
        Command::ExpUtilization(a) => commands::exp_utilization(a),
        Command::ExpVbr(a) => commands::exp_vbr(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("revq: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("revq: {msg}");
            ExitCode::from(1)
        }
    }
}
