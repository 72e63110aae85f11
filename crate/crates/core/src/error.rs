use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("unsupported channel count {0} (expected 1, 3 or 4)")]
    UnsupportedChannels(usize),

    #[error("invalid raster: {0}")]
    InvalidRaster(String),

    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },

    #[error("{height}x{width} is not divisible by {factor}")]
    NotDivisible {
        height: usize,
        width: usize,
        factor: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("metric {metric}: {reason}")]
    Metric {
        metric: &'static str,
        reason: String,
    },

    #[error("network stage {stage}: {reason}")]
    Network { stage: String, reason: String },

    #[error("non-finite {what} at step {step}: {detail}")]
    NonFinite {
        what: &'static str,
        step: usize,
        detail: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn network(stage: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Network {
            stage: stage.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn metric(metric: &'static str, reason: impl Into<String>) -> Self {
        Error::Metric {
            metric,
            reason: reason.into(),
        }
    }
}
