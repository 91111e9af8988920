//! `transclaw`: generate phantom data, train, evaluate, predict, check
//! gradients and run ablations.
//!
//! Exit status: 0 on success, 1 on an internal failure (including a failed
//! gradient check), 2 on a usage or input error.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] transclaw::Error),

    #[error("{0}")]
    Usage(String),

    #[error("gradient check failed: {0}")]
    GradcheckFailed(String),

    #[error("{path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_input_error() => 2,
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "transclaw", version, about = "TransClaw U-Net segmentation on the CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic phantom dataset
    Generate(GenerateArgs),
    /// Train a model on a dataset's train split
    Train(TrainArgs),
    /// Score a checkpoint (or saved predictions) on a dataset split
    Eval(EvalArgs),
    /// Write argmax masks for images
    Predict(PredictArgs),
    /// Finite-difference check of every backward rule (always 64-bit)
    Gradcheck(GradcheckArgs),
    /// Retrain across one architecture axis and tabulate validation metrics
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

/// Architecture overrides shared by train and ablate.
#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Model config JSON; defaults are used when absent
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Skip budget s (number of levels with encoder/up-path connections)
    #[arg(long)]
    pub skips: Option<usize>,
    /// Patch size on the deepest feature map
    #[arg(long)]
    pub patch: Option<usize>,
    /// Input extent, `H` or `HxW`
    #[arg(long)]
    pub resolution: Option<String>,
}

/// Optimization flags shared by train and ablate.
#[derive(Debug, Args)]
pub struct OptimArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Apply weight decay to normalization and position parameters too
    #[arg(long)]
    pub decay_all: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub count: usize,
    /// Number of classes including background
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Image extent, `H` or `HxW`
    #[arg(long, default_value = "64")]
    pub resolution: String,
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.25)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0.0)]
    pub test_fraction: f64,
    #[arg(long, default_value = "phantom")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Dataset directory (with manifest.json)
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Seeds model initialization and batch order
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    /// Suppress per-epoch progress lines
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// Directory of `<sample>.mask` files to score instead of a checkpoint
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Model config the checkpoint must match
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image files: sample files or bare `[C, H, W]` tensor files
    #[arg(long, num_args = 1..)]
    pub images: Vec<PathBuf>,
    /// Predict every sample of a dataset split instead
    #[arg(long, conflicts_with = "images", requires = "split")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a color-mapped PPM per image
    #[arg(long)]
    pub color: bool,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random input draws per operator
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Skip the whole-network check
    #[arg(long)]
    pub skip_end_to_end: bool,
    /// Scale one backward rule on purpose (negative control)
    #[arg(long)]
    pub corrupt: Option<String>,
    /// Accepted for uniformity; the check always runs in 64-bit
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// skips, patch or resolution
    #[arg(long)]
    pub axis: String,
    /// Comma-separated axis values, e.g. `0,1,2,3` or `32x32,64x64`
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    /// Dataset directory; phantoms are generated when absent
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Phantom count when generating
    #[arg(long, default_value_t = 32)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Run cells one after another instead of in parallel
    #[arg(long)]
    pub sequential: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Ablate(a) => commands::ablate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
