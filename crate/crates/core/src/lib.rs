//! Pansharpening with a dual attention two-stream network.
//!
//! The crate covers the whole reduced-resolution workflow: raster I/O and
//! Wald-style degradation ([`imaging`], [`io`]), reference-based quality
//! metrics ([`metrics`]), classical baselines ([`baselines`]), the network
//! itself ([`model`], built on the kernels in [`nn`]) and its L1/Adam
//! training loop ([`trainer`]) with portable checkpoints ([`checkpoint`]).

pub mod baselines;
pub mod checkpoint;
pub mod error;
pub mod imaging;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod raster;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
pub use imaging::{DegradeConfig, Sample};
pub use metrics::{MetricConfig, MetricReport};
pub use model::{DatsModel, Manifest};
pub use raster::Raster;
