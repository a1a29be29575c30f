use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "prose", version, about = "Train and evaluate block-orthonormal disentangling autoencoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset (or convert an IDX pair) to a dataset file
    GenData(GenDataArgs),
    /// Train a model and write checkpoint.bin, metrics.csv and config.cfg
    Train(TrainArgs),
    /// Score a checkpoint: mAP table, assignment, leakage, orthonormality
    Eval(EvalArgs),
    /// Write an attribute-transfer grid as a PPM/PGM image
    Transfer(TransferArgs),
    /// Write a single-block interpolation strip as a PPM/PGM image
    Interpolate(InterpolateArgs),
    /// Print a checkpoint's header and tensor table
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Quads,
    Mnist,
}

impl PresetArg {
    pub fn name(self) -> &'static str {
        match self {
            Self::Quads => "quads",
            Self::Mnist => "mnist",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackboneArg {
    Swap,
    Bvae,
}

/// Model and optimizer settings; each has a config-file key of the same
/// name with `-` replaced by `_`, except `--no-cayley`, which is
/// `cayley = false`.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigFlags {
    /// `key = value` config file (applied after the preset, before flags)
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lambda_orth: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, value_enum)]
    pub backbone: Option<BackboneArg>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Disable the training-time Cayley step
    #[arg(long)]
    pub no_cayley: bool,
}

#[derive(Debug, Clone, Args)]
pub struct DataFlags {
    /// Dataset file from `gen-data`; without it the synthetic set is rendered
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Seed for rendering the synthetic set when no --data is given [default: 0]
    #[arg(long)]
    pub data_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// IDX image file to convert instead of rendering
    #[arg(long, value_name = "PATH", requires = "idx_labels")]
    pub idx_images: Option<PathBuf>,
    #[arg(long, value_name = "PATH", requires = "idx_images")]
    pub idx_labels: Option<PathBuf>,
    /// For IDX input, every n-th example goes to the test split
    #[arg(long, default_value_t = 6)]
    pub test_every: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigFlags,
    #[command(flatten)]
    pub data: DataFlags,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataFlags,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Seed for the PCA start vector
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Project codes onto the Stiefel manifold before scoring
    #[arg(long)]
    pub projected: bool,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataFlags,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub block: usize,
    /// Dataset indices supplying every block but the transferred one
    #[arg(long, value_delimiter = ',', value_name = "I,J,..")]
    pub rows: Vec<usize>,
    /// Dataset indices donating the transferred block
    #[arg(long, value_delimiter = ',', value_name = "I,J,..")]
    pub cols: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataFlags,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub from: usize,
    #[arg(long)]
    pub to: usize,
    #[arg(long)]
    pub block: usize,
    #[arg(long, default_value_t = 8)]
    pub steps: usize,
    /// Interpolate linearly instead of along the sphere
    #[arg(long)]
    pub lerp: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
}
