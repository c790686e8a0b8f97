mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tcc::TccError;

#[derive(Parser)]
#[command(
    name = "tcc",
    version,
    about = "Temporal cycle-consistency embedding training and alignment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (manifest plus TCCF frame files).
    SynthGen(SynthGenArgs),
    /// Train an embedder.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Align two sequences in embedding space.
    Align(AlignArgs),
    /// Export the exp(-d²) similarity matrix of two sequences.
    Simmat(PairArgs),
    /// Per-frame distance of a query to a set of reference sequences.
    Anomaly(AnomalyArgs),
    /// Carry phase labels from a source sequence to a target sequence.
    Transfer(TransferArgs),
    /// Finite-difference check of every loss on random instances.
    GradCheck(GradCheckArgs),
    /// Write per-frame embeddings as TCCF files.
    ExportEmbeddings(ExportArgs),
}

#[derive(Args)]
pub struct SynthGenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub num: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub phases: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 60)]
    pub min_len: usize,
    #[arg(long, default_value_t = 120)]
    pub max_len: usize,
    /// Feature dimension of every frame.
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 1.0)]
    pub warp: f64,
    /// Fraction of sequences assigned to the train split.
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path; the loss log and summary are written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with any subset of the training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from this checkpoint up to `--steps` total steps; its stored
    /// configuration is used and other training flags are ignored.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub combine_weight: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Stop once the moving-average loss plateaus.
    #[arg(long)]
    pub early_stop: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Fraction of labelled training videos for the phase classifier; repeatable.
    #[arg(long = "label-fraction")]
    pub label_fractions: Vec<f64>,
    /// Only Kendall's tau and cycle consistency; no labels needed.
    #[arg(long)]
    pub alignment_only: bool,
    /// Also write the report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct PairArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub a: String,
    #[arg(long)]
    pub b: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct AlignArgs {
    #[command(flatten)]
    pub pair: PairArgs,
    #[arg(long, default_value = "dtw")]
    pub mode: String,
    /// Sakoe-Chiba band half-width for DTW.
    #[arg(long)]
    pub band: Option<usize>,
}

#[derive(Args)]
pub struct AnomalyArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub query: String,
    #[arg(long, value_delimiter = ',', required = true)]
    pub refs: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TransferArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub source: String,
    #[arg(long)]
    pub target: String,
    #[arg(long, default_value = "dtw")]
    pub mode: String,
    #[arg(long)]
    pub band: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Random instances per loss.
    #[arg(long, default_value_t = 50)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Export one sequence to the file `--out`; without it `--out` is a
    /// directory receiving a manifest and one file per sequence.
    #[arg(long)]
    pub seq: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Raised by subcommands that ran to completion but whose outcome is a failure.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct CheckFailed(pub String);

fn exit_code(err: &anyhow::Error) -> (u8, &'static str) {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return (12, "check");
    }
    match err.downcast_ref::<TccError>() {
        Some(TccError::Contract(_)) => (3, "contract"),
        Some(TccError::Shape(_)) => (4, "shape"),
        Some(TccError::Degenerate(_)) => (5, "degenerate"),
        Some(TccError::Undefined(_)) => (6, "undefined"),
        Some(TccError::MissingFile(_)) => (7, "missing-file"),
        Some(
            TccError::BadMagic { .. }
            | TccError::Version { .. }
            | TccError::Truncated { .. }
            | TccError::SizeOverflow { .. }
            | TccError::Manifest { .. },
        ) => (8, "format"),
        Some(TccError::MissingAnnotation(_)) => (9, "missing-annotation"),
        Some(TccError::UnknownSequence(_)) => (10, "unknown-sequence"),
        Some(TccError::Io(_)) => (11, "io"),
        None => (1, "error"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthGen(a) => commands::synth_gen(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Align(a) => commands::align(a),
        Command::Simmat(a) => commands::simmat(a),
        Command::Anomaly(a) => commands::anomaly(a),
        Command::Transfer(a) => commands::transfer(a),
        Command::GradCheck(a) => commands::grad_check(a),
        Command::ExportEmbeddings(a) => commands::export_embeddings(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, kind) = exit_code(&err);
            eprintln!("error[{kind}]: {err:#}");
            ExitCode::from(code)
        }
    }
}
