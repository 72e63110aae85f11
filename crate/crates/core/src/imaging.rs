//! Wald-style degradation, bicubic resampling, patch extraction and
//! false-color previews.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Resolution ratio between PAN and MS (0.5 m vs 2 m ground sampling).
pub const DEFAULT_SCALE: usize = 4;

/// Blur-then-decimate settings used to simulate the coarser sensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradeConfig {
    pub scale: usize,
    /// Gaussian standard deviation along rows and columns, in input pixels.
    pub sigma: (f64, f64),
    /// Offset of the first retained sample inside each `scale` block.
    pub phase: usize,
}

impl DegradeConfig {
    /// Gaussian with std = scale / 2 per axis, top-left sampling phase.
    pub fn with_scale(scale: usize) -> Self {
        let s = scale as f64 / 2.0;
        Self {
            scale,
            sigma: (s, s),
            phase: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale < 2 {
            return Err(Error::Config(format!("scale {} < 2", self.scale)));
        }
        if !(self.sigma.0 > 0.0 && self.sigma.1 > 0.0)
            || !self.sigma.0.is_finite()
            || !self.sigma.1.is_finite()
        {
            return Err(Error::Config(format!(
                "blur sigma must be positive, got {:?}",
                self.sigma
            )));
        }
        if self.phase >= self.scale {
            return Err(Error::Config(format!(
                "phase {} must be below scale {}",
                self.phase, self.scale
            )));
        }
        Ok(())
    }
}

impl Default for DegradeConfig {
    fn default() -> Self {
        Self::with_scale(DEFAULT_SCALE)
    }
}

/// One training/evaluation tuple. `pan`, `lrms_up` and `hrms_ref` share a
/// spatial size; `lrms` is `scale` times smaller per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub lrms: Raster,
    pub pan: Raster,
    pub lrms_up: Raster,
    pub hrms_ref: Raster,
}

impl Sample {
    /// Builds a sample, deriving `lrms_up` from `lrms`.
    pub fn new(lrms: Raster, pan: Raster, hrms_ref: Raster, scale: usize) -> Result<Self> {
        let lrms_up = upsample(&lrms, scale)?;
        let s = Self {
            lrms,
            pan,
            lrms_up,
            hrms_ref,
        };
        s.check(scale)?;
        Ok(s)
    }

    pub fn check(&self, scale: usize) -> Result<()> {
        let (h, w, _) = self.pan.shape();
        if self.pan.channels() != 1 {
            return Err(Error::InvalidRaster(format!(
                "PAN has {} channels",
                self.pan.channels()
            )));
        }
        for r in [&self.lrms_up, &self.hrms_ref] {
            if (r.height(), r.width()) != (h, w) {
                return Err(Error::DimensionMismatch {
                    expected: (h, w, r.channels()),
                    found: r.shape(),
                });
            }
        }
        if self.lrms.height() * scale != h || self.lrms.width() * scale != w {
            return Err(Error::DimensionMismatch {
                expected: (h / scale, w / scale, self.lrms.channels()),
                found: self.lrms.shape(),
            });
        }
        Ok(())
    }
}

/// Normalized 1-D Gaussian truncated at 4 sigma.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Separable convolution of every band with replicate borders.
pub(crate) fn separable_filter(r: &Raster, row_kernel: &[f64], col_kernel: &[f64]) -> Raster {
    let (h, w, c) = r.shape();
    let src = r.data();
    let ry = (col_kernel.len() / 2) as isize;
    let rx = (row_kernel.len() / 2) as isize;

    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for (k, kv) in row_kernel.iter().enumerate() {
                let sx = clamp_index(x as isize + k as isize - rx, w);
                let base_s = (y * w + sx) * c;
                let base_d = (y * w + x) * c;
                for b in 0..c {
                    tmp[base_d + b] += kv * src[base_s + b];
                }
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for (k, kv) in col_kernel.iter().enumerate() {
            let sy = clamp_index(y as isize + k as isize - ry, h);
            for x in 0..w {
                let base_s = (sy * w + x) * c;
                let base_d = (y * w + x) * c;
                for b in 0..c {
                    out[base_d + b] += kv * tmp[base_s + b];
                }
            }
        }
    }
    r.with_data(h, w, out)
}

/// Gaussian blur followed by decimation by `cfg.scale`.
pub fn degrade(r: &Raster, cfg: &DegradeConfig) -> Result<Raster> {
    cfg.validate()?;
    let (h, w, c) = r.shape();
    if h % cfg.scale != 0 || w % cfg.scale != 0 {
        return Err(Error::NotDivisible {
            height: h,
            width: w,
            factor: cfg.scale,
        });
    }
    // Row kernel acts along x (width), column kernel along y (height).
    let blurred = separable_filter(r, &gaussian_kernel(cfg.sigma.1), &gaussian_kernel(cfg.sigma.0));
    let (oh, ow) = (h / cfg.scale, w / cfg.scale);
    let mut out = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        for x in 0..ow {
            out.extend_from_slice(blurred.pixel(y * cfg.scale + cfg.phase, x * cfg.scale + cfg.phase));
        }
    }
    Ok(r.with_data(oh, ow, out))
}

/// Catmull-Rom cubic convolution weight (a = -0.5).
pub fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Per-output-index source taps and weights along one axis.
fn cubic_taps(n_in: usize, scale: usize) -> Vec<([usize; 4], [f64; 4])> {
    (0..n_in * scale)
        .map(|o| {
            let src = (o as f64 + 0.5) / scale as f64 - 0.5;
            let base = src.floor();
            let frac = src - base;
            let mut idx = [0usize; 4];
            let mut wts = [0.0; 4];
            for k in 0..4 {
                let off = k as isize - 1;
                idx[k] = clamp_index(base as isize + off, n_in);
                wts[k] = cubic_weight(frac - off as f64);
            }
            (idx, wts)
        })
        .collect()
}

/// Bicubic enlargement by an integer factor, clamped to [0, 1].
///
/// Output pixel centers map to `(o + 0.5) / scale - 0.5` in the input grid;
/// borders replicate.
pub fn upsample(r: &Raster, scale: usize) -> Result<Raster> {
    if scale < 2 {
        return Err(Error::Config(format!("upsample scale {scale} < 2")));
    }
    let (h, w, c) = r.shape();
    let (oh, ow) = (h * scale, w * scale);
    let xt = cubic_taps(w, scale);
    let yt = cubic_taps(h, scale);
    let src = r.data();

    // Horizontal pass: h x ow.
    let mut tmp = vec![0.0; h * ow * c];
    for y in 0..h {
        for (x, (idx, wts)) in xt.iter().enumerate() {
            let d = (y * ow + x) * c;
            for k in 0..4 {
                let s = (y * w + idx[k]) * c;
                for b in 0..c {
                    tmp[d + b] += wts[k] * src[s + b];
                }
            }
        }
    }
    let mut out = vec![0.0; oh * ow * c];
    for (y, (idx, wts)) in yt.iter().enumerate() {
        for k in 0..4 {
            let s_row = idx[k] * ow * c;
            let d_row = y * ow * c;
            for i in 0..ow * c {
                out[d_row + i] += wts[k] * tmp[s_row + i];
            }
        }
    }
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(r.with_data(oh, ow, out))
}

/// Number of windows along an axis of length `n`.
pub fn window_count(n: usize, patch: usize, stride: usize) -> usize {
    if patch > n || stride == 0 {
        0
    } else {
        (n - patch) / stride + 1
    }
}

/// Default stride: half a patch for training, a full patch for evaluation.
pub fn default_stride(patch: usize, training: bool) -> usize {
    if training {
        (patch / 2).max(1)
    } else {
        patch
    }
}

/// Cuts reduced-resolution samples out of a co-registered PAN/MS pair.
///
/// `patch` and `stride` are in PAN pixels. For each window the MS patch is the
/// reference, and both the PAN patch and the MS patch are degraded by
/// `cfg.scale` to form the network inputs. Windows are emitted in row-major
/// order.
pub fn extract_patches(
    pan: &Raster,
    ms: &Raster,
    patch: usize,
    stride: usize,
    cfg: &DegradeConfig,
) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let s = cfg.scale;
    if pan.channels() != 1 {
        return Err(Error::InvalidRaster(format!(
            "PAN has {} channels",
            pan.channels()
        )));
    }
    if pan.height() != ms.height() * s || pan.width() != ms.width() * s {
        return Err(Error::DimensionMismatch {
            expected: (pan.height() / s, pan.width() / s, ms.channels()),
            found: ms.shape(),
        });
    }
    if patch % (s * s) != 0 {
        return Err(Error::Config(format!(
            "patch {patch} must be divisible by scale^2 = {}",
            s * s
        )));
    }
    if stride == 0 || stride % s != 0 {
        return Err(Error::Config(format!(
            "stride {stride} must be a positive multiple of scale {s}"
        )));
    }
    if patch > pan.height() || patch > pan.width() {
        return Err(Error::Config(format!(
            "patch {patch} larger than {}x{} image",
            pan.height(),
            pan.width()
        )));
    }
    let ny = window_count(pan.height(), patch, stride);
    let nx = window_count(pan.width(), patch, stride);
    let mp = patch / s;
    let mut out = Vec::with_capacity(ny * nx);
    for wy in 0..ny {
        for wx in 0..nx {
            let (y0, x0) = (wy * stride, wx * stride);
            let pan_patch = pan.crop(y0, x0, patch, patch)?;
            let hrms_ref = ms.crop(y0 / s, x0 / s, mp, mp)?;
            let lrms = degrade(&hrms_ref, cfg)?;
            let pan_low = degrade(&pan_patch, cfg)?;
            out.push(Sample::new(lrms, pan_low, hrms_ref, s)?);
        }
    }
    Ok(out)
}

/// Min-max stretch of one plane; a flat plane maps to 0.5.
fn stretch(plane: &[f64]) -> Vec<f64> {
    let (lo, hi) = plane
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(*v), hi.max(*v))
        });
    if hi <= lo {
        vec![0.5; plane.len()]
    } else {
        plane.iter().map(|v| (v - lo) / (hi - lo)).collect()
    }
}

/// False-color composite: bands 3, 2, 1 (1-based) on R, G, B, each stretched.
pub fn false_color(r: &Raster) -> Result<Raster> {
    if r.channels() < 3 {
        return Err(Error::InvalidRaster(format!(
            "false color needs at least 3 bands, got {}",
            r.channels()
        )));
    }
    let planes: Vec<Vec<f64>> = [2, 1, 0].iter().map(|b| stretch(&r.band(*b))).collect();
    Raster::from_bands(r.height(), r.width(), &planes)
}
