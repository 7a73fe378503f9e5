mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use earseg_core::Layout;

use run_config::Command;

#[derive(Parser, Debug)]
#[command(name = "earseg", version, about = "Two-stage retinal vessel segmentation with error attention")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Stage 1: train the segmentation trunk.
    Train(Common),
    /// Stage 2: predict the training set, build error maps, fine-tune with attention.
    Refine(Common),
    /// Write predicted masks for every image.
    Predict(Common),
    /// Score a checkpoint, or cross-validate with --folds.
    Evaluate(Common),
    /// K-fold cross-validation of the full two-stage protocol.
    Crossval(Common),
    /// Generate a synthetic dataset in the generic layout.
    Synth(SynthArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Training config (TOML); flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Epoch count of the stage being run.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Dataset layout: drive, stare or generic.
    #[arg(long, default_value_t = Layout::Generic)]
    pub layout: Layout,
    /// Dataset root.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory for checkpoints, logs, caches and reports.
    #[arg(long, default_value = "runs/default")]
    pub out: PathBuf,
    /// Count every pixel instead of only those inside the FOV mask.
    #[arg(long)]
    pub no_fov: bool,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Checkpoint to load; defaults to the latest one of the relevant stage in --out.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Skip attention refinement even if the checkpoint has attention weights.
    #[arg(long)]
    pub no_fuse: bool,
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use earseg_core::Error as E;
    match err.downcast_ref::<E>() {
        Some(
            E::PathNotFound(_)
            | E::NoSamples(_)
            | E::EmptyDataset
            | E::MissingPair { .. }
            | E::ShapeMismatch { .. }
            | E::NotDivisible { .. }
            | E::InvalidArgument(_)
            | E::Config(_)
            | E::Image { .. },
        ) => 2,
        Some(
            E::CheckpointParse(_) | E::MissingErrorMap(_) | E::MissingAttentionWeights | E::NonFiniteLoss { .. },
        ) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Train(a) => commands::run(Command::Train, a),
        Cmd::Refine(a) => commands::run(Command::Refine, a),
        Cmd::Predict(a) => commands::run(Command::Predict, a),
        Cmd::Evaluate(a) => commands::run(Command::Evaluate, a),
        Cmd::Crossval(a) => commands::run(Command::Crossval, a),
        Cmd::Synth(a) => commands::synth(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
