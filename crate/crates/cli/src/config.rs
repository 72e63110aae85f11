//! Flat experiment config file. Every key is optional; command-line flags win
//! over file values, and file values win over built-in defaults.

use std::path::{Path, PathBuf};

use dats_core::baselines::BaselineMethod;
use dats_core::baselines::BaselineKind;
use dats_core::metrics::{AngleUnit, MetricConfig, UiqiMode};
use dats_core::trainer::TrainConfig;
use dats_core::{DegradeConfig, Manifest};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    // Degradation and patches.
    pub scale: Option<usize>,
    pub sigma: Option<f64>,
    pub patch: Option<usize>,
    pub stride: Option<usize>,

    // Metrics.
    pub resolution_ratio: Option<f64>,
    pub ssim_window: Option<usize>,
    pub ssim_sigma: Option<f64>,
    pub uiqi_window: Option<usize>,
    pub uiqi_mode: Option<UiqiMode>,
    pub sam_unit: Option<AngleUnit>,

    // Training.
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub adam_beta1: Option<f64>,
    pub adam_beta2: Option<f64>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub checkpoint_every: Option<usize>,
    pub grad_clip: Option<f64>,
    pub holdout: Option<f64>,

    // Model.
    pub width_divisor: Option<usize>,
    pub final_init_scale: Option<f64>,
    pub residual_units: Option<usize>,

    // Baselines.
    pub hpf_kernel: Option<usize>,

    // Paths.
    pub pan: Option<PathBuf>,
    pub ms: Option<PathBuf>,
    pub data: Option<Vec<PathBuf>>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|m| CliError::Usage(format!("{}: {m}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn scale(&self) -> usize {
        self.scale.unwrap_or(dats_core::imaging::DEFAULT_SCALE)
    }

    pub fn degrade(&self) -> Result<DegradeConfig, CliError> {
        let mut d = DegradeConfig::with_scale(self.scale());
        if let Some(s) = self.sigma {
            d.sigma = (s, s);
        }
        d.validate()?;
        Ok(d)
    }

    pub fn metrics(&self) -> Result<MetricConfig, CliError> {
        let base = MetricConfig::default();
        let m = MetricConfig {
            resolution_ratio: self.resolution_ratio.unwrap_or(1.0 / self.scale() as f64),
            ssim_window: self.ssim_window.unwrap_or(base.ssim_window),
            ssim_sigma: self.ssim_sigma.unwrap_or(base.ssim_sigma),
            uiqi_window: self.uiqi_window.unwrap_or(base.uiqi_window),
            uiqi_mode: self.uiqi_mode.unwrap_or(base.uiqi_mode),
            sam_unit: self.sam_unit.unwrap_or(base.sam_unit),
            ..base
        };
        m.validate()?;
        Ok(m)
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        let base = TrainConfig::default();
        let t = TrainConfig {
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            adam_beta1: self.adam_beta1.unwrap_or(base.adam_beta1),
            adam_beta2: self.adam_beta2.unwrap_or(base.adam_beta2),
            epochs: self.epochs.unwrap_or(base.epochs),
            seed: self.seed.unwrap_or(base.seed),
            checkpoint_every: self.checkpoint_every.unwrap_or(base.checkpoint_every),
            grad_clip: self.grad_clip.or(base.grad_clip),
            ..base
        };
        t.validate()?;
        Ok(t)
    }

    pub fn manifest(&self) -> Result<Manifest, CliError> {
        let mut m = Manifest::reduced(self.width_divisor.unwrap_or(1));
        if let Some(s) = self.final_init_scale {
            m.final_init_scale = s;
        }
        if let Some(r) = self.residual_units {
            m.residual_units = r;
        }
        m.validate()?;
        Ok(m)
    }

    pub fn baseline(&self, kind: BaselineKind) -> Result<BaselineMethod, CliError> {
        let mut b = BaselineMethod::new(kind);
        if let Some(k) = self.hpf_kernel {
            b.hpf_kernel = k;
        }
        b.validate()?;
        Ok(b)
    }

    pub fn holdout(&self) -> Result<f64, CliError> {
        let h = self.holdout.unwrap_or(0.0);
        if !(0.0..1.0).contains(&h) {
            return Err(CliError::Usage(format!("holdout {h} must lie in [0, 1)")));
        }
        Ok(h)
    }
}
