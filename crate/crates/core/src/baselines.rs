//! Classical component-substitution and detail-injection pansharpening.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::separable_filter;
use crate::raster::Raster;

/// Denominator guard for Brovey on dark pixels.
pub const BROVEY_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Ihs,
    Brovey,
    Hpf,
    Bicubic,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [
        BaselineKind::Ihs,
        BaselineKind::Brovey,
        BaselineKind::Hpf,
        BaselineKind::Bicubic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Ihs => "ihs",
            BaselineKind::Brovey => "brovey",
            BaselineKind::Hpf => "hpf",
            BaselineKind::Bicubic => "bicubic",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown baseline {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineMethod {
    pub kind: BaselineKind,
    /// Box size of the HPF low-pass; ignored by other methods.
    pub hpf_kernel: usize,
}

impl BaselineMethod {
    pub fn new(kind: BaselineKind) -> Self {
        Self {
            kind,
            hpf_kernel: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hpf_kernel < 3 || self.hpf_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "HPF kernel {} must be odd and >= 3",
                self.hpf_kernel
            )));
        }
        Ok(())
    }
}

/// Per-pixel band mean.
pub fn intensity(ms: &Raster) -> Vec<f64> {
    let c = ms.channels() as f64;
    ms.data()
        .chunks_exact(ms.channels())
        .map(|p| p.iter().sum::<f64>() / c)
        .collect()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Matches the mean and standard deviation of `pan` to `target`.
pub fn match_histogram(pan: &[f64], target: &[f64]) -> Vec<f64> {
    let (mp, sp) = mean_std(pan);
    let (mt, st) = mean_std(target);
    if sp == 0.0 {
        return vec![mt; pan.len()];
    }
    pan.iter().map(|p| (p - mp) * (st / sp) + mt).collect()
}

/// PAN minus its box-filtered copy.
pub fn high_pass(pan: &Raster, size: usize) -> Vec<f64> {
    let k = vec![1.0 / size as f64; size];
    let low = separable_filter(pan, &k, &k);
    pan.data()
        .iter()
        .zip(low.data())
        .map(|(p, l)| p - l)
        .collect()
}

/// Fuses PAN with the upsampled MS using a classical method, clamped to [0, 1].
pub fn pansharpen_classical(method: &BaselineMethod, pan: &Raster, lrms_up: &Raster) -> Result<Raster> {
    method.validate()?;
    if pan.channels() != 1 {
        return Err(Error::InvalidRaster(format!(
            "PAN has {} channels",
            pan.channels()
        )));
    }
    if lrms_up.channels() != 4 {
        return Err(Error::InvalidRaster(format!(
            "upsampled MS has {} bands, expected 4",
            lrms_up.channels()
        )));
    }
    if (pan.height(), pan.width()) != (lrms_up.height(), lrms_up.width()) {
        return Err(Error::DimensionMismatch {
            expected: (lrms_up.height(), lrms_up.width(), 1),
            found: pan.shape(),
        });
    }
    let c = lrms_up.channels();
    let mut out = lrms_up.clone();
    match method.kind {
        BaselineKind::Bicubic => return Ok(out),
        BaselineKind::Ihs => {
            let i = intensity(lrms_up);
            let matched = match_histogram(pan.data(), &i);
            for ((px, m), iv) in out.data_mut().chunks_exact_mut(c).zip(&matched).zip(&i) {
                let detail = m - iv;
                px.iter_mut().for_each(|v| *v += detail);
            }
        }
        BaselineKind::Brovey => {
            let i = intensity(lrms_up);
            let matched = match_histogram(pan.data(), &i);
            for ((px, m), iv) in out.data_mut().chunks_exact_mut(c).zip(&matched).zip(&i) {
                let gain = m / (iv + BROVEY_EPSILON);
                px.iter_mut().for_each(|v| *v *= gain);
            }
        }
        BaselineKind::Hpf => {
            let detail = high_pass(pan, method.hpf_kernel);
            for (px, d) in out.data_mut().chunks_exact_mut(c).zip(&detail) {
                px.iter_mut().for_each(|v| *v += d);
            }
        }
    }
    out.clamp_unit();
    Ok(out)
}
