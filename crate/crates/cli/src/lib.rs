//! Command-line front end: sample preparation, training, inference and
//! metric reports.

pub mod archive;
pub mod commands;
pub mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

pub use commands::run;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const IO: i32 = 3;
    pub const NUMERIC: i32 = 4;
    pub const INVALID_DATA: i32 = 5;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    InvalidData(String),
    #[error(transparent)]
    Core(#[from] dats_core::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn exit_code(&self) -> i32 {
        use dats_core::Error as E;
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Io { .. } => exit::IO,
            CliError::InvalidData(_) => exit::INVALID_DATA,
            CliError::Core(e) => match e {
                E::Io { .. } => exit::IO,
                E::Config(_) => exit::USAGE,
                E::NonFinite { .. } | E::Metric { .. } => exit::NUMERIC,
                E::Format { .. }
                | E::UnsupportedChannels(_)
                | E::InvalidRaster(_)
                | E::DimensionMismatch { .. }
                | E::NotDivisible { .. }
                | E::Network { .. } => exit::INVALID_DATA,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dats", version, about = "Dual attention two-stream pansharpening")]
pub struct Cli {
    /// Flat key = value experiment file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for weight init and data shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cut a PAN/MS pair into reduced-resolution samples.
    Prepare(PrepareArgs),
    /// Train the network on one or more sample archives.
    Train(TrainArgs),
    /// Fuse one PAN image with its MS image.
    Pansharpen(PansharpenArgs),
    /// Score a fused image against a reference.
    Evaluate(EvaluateArgs),
    /// Average metrics of several methods over sample archives.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Layout {
    /// Band-interleaved by pixel.
    Bip,
    /// Band-sequential.
    Bsq,
}

impl From<Layout> for dats_core::io::BandLayout {
    fn from(l: Layout) -> Self {
        match l {
            Layout::Bip => Self::Interleaved,
            Layout::Bsq => Self::Sequential,
        }
    }
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub pan: Option<PathBuf>,
    /// Multiband MS image.
    #[arg(long, conflicts_with = "ms_bands")]
    pub ms: Option<PathBuf>,
    /// One single-band file per MS band, in band order.
    #[arg(long, num_args = 4, value_name = "BAND")]
    pub ms_bands: Option<Vec<PathBuf>>,
    /// Sample layout of PSRK inputs.
    #[arg(long, value_enum, default_value = "bip")]
    pub layout: Layout,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Window size in PAN pixels.
    #[arg(long)]
    pub patch: Option<usize>,
    /// Window step in PAN pixels; defaults to half a patch.
    #[arg(long)]
    pub stride: Option<usize>,
    /// Non-overlapping windows (stride = patch) for evaluation sets.
    #[arg(long, conflicts_with = "stride")]
    pub eval: bool,
    /// Scene tag recorded in the archive.
    #[arg(long, default_value = "unknown")]
    pub source: String,
    /// Write a false-color PNG of the first sample's reference.
    #[arg(long)]
    pub preview: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Sample archive directory; repeatable.
    #[arg(long)]
    pub data: Vec<PathBuf>,
    /// Directory for checkpoints and the training log.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub width_divisor: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Fraction of samples kept out of training and scored at the end.
    #[arg(long)]
    pub holdout: Option<f64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PansharpenArgs {
    /// ihs, brovey, hpf, bicubic or dats.
    #[arg(long)]
    pub method: String,
    /// Trained network; required for dats only.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub pan: PathBuf,
    /// Low-resolution MS, `scale` times smaller than PAN.
    #[arg(long)]
    pub lrms: PathBuf,
    #[arg(long, value_enum, default_value = "bip")]
    pub layout: Layout,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a false-color PNG of the result.
    #[arg(long)]
    pub preview: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub fused: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long, value_enum, default_value = "bip")]
    pub layout: Layout,
    /// Row label.
    #[arg(long, default_value = "fused")]
    pub name: String,
    /// Print a JSON record instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    All,
    /// Archives whose source tag was seen in training.
    Favorable,
    /// Archives from sources the network never saw.
    Typical,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Sample archive directory; repeatable.
    #[arg(long)]
    pub data: Vec<PathBuf>,
    /// Methods in report order.
    #[arg(long, value_delimiter = ',', default_value = "ihs,brovey,hpf,bicubic")]
    pub methods: Vec<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    pub split: Split,
    /// Write the human-readable table here as well as to stdout.
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Write JSON-lines records here.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Directory for false-color PNGs of each method on the first sample.
    #[arg(long)]
    pub preview: Option<PathBuf>,
}

pub(crate) fn required<'a>(v: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, CliError> {
    v.as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing {what} (flag or config key)")))
}
