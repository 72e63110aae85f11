//! Reference-based quality indices for fused multispectral images.
//!
//! All functions take `(fused, reference)` in that order.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AngleUnit {
    #[default]
    Radians,
    Degrees,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum UiqiMode {
    /// Sliding square windows, stride 1, averaged.
    #[default]
    Windowed,
    /// One window covering the whole band.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    /// High- to low-resolution pixel-size ratio (dk/dl) in ERGAS.
    pub resolution_ratio: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
    pub uiqi_window: usize,
    pub uiqi_mode: UiqiMode,
    pub sam_unit: AngleUnit,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            resolution_ratio: 0.25,
            ssim_window: 11,
            ssim_sigma: 1.5,
            ssim_c1: 0.01 * 0.01,
            ssim_c2: 0.03 * 0.03,
            uiqi_window: 8,
            uiqi_mode: UiqiMode::Windowed,
            sam_unit: AngleUnit::Radians,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.resolution_ratio > 0.0) || !self.resolution_ratio.is_finite() {
            return Err(Error::Config(format!(
                "resolution ratio {} must be positive",
                self.resolution_ratio
            )));
        }
        if self.ssim_window < 3 || self.ssim_window % 2 == 0 {
            return Err(Error::Config(format!(
                "SSIM window {} must be odd and >= 3",
                self.ssim_window
            )));
        }
        // The Wang-Bovik block is 8x8, so even sizes are allowed here.
        if self.uiqi_window < 2 {
            return Err(Error::Config(format!(
                "UIQI window {} must be >= 2",
                self.uiqi_window
            )));
        }
        if !(self.ssim_c1 > 0.0 && self.ssim_c2 > 0.0 && self.ssim_sigma > 0.0) {
            return Err(Error::Config("SSIM constants and sigma must be positive".into()));
        }
        Ok(())
    }
}

fn check_pair(metric: &'static str, fused: &Raster, reference: &Raster) -> Result<()> {
    if fused.shape() != reference.shape() {
        return Err(Error::metric(
            metric,
            format!(
                "fused {:?} and reference {:?} differ in shape",
                fused.shape(),
                reference.shape()
            ),
        ));
    }
    Ok(())
}

/// Relative dimensionless global error in synthesis.
pub fn ergas(fused: &Raster, reference: &Raster, cfg: &MetricConfig) -> Result<f64> {
    check_pair("ERGAS", fused, reference)?;
    let (c, n) = (reference.channels(), reference.pixel_count() as f64);
    let mut sq_err = vec![0.0; c];
    let mut sums = vec![0.0; c];
    for (f, r) in fused.data().chunks_exact(c).zip(reference.data().chunks_exact(c)) {
        for b in 0..c {
            let d = f[b] - r[b];
            sq_err[b] += d * d;
            sums[b] += r[b];
        }
    }
    let mut acc = 0.0;
    for b in 0..c {
        let mean = sums[b] / n;
        if mean == 0.0 {
            return Err(Error::metric("ERGAS", format!("reference band {b} has zero mean")));
        }
        let rmse = (sq_err[b] / n).sqrt();
        acc += (rmse / mean).powi(2);
    }
    Ok(100.0 * cfg.resolution_ratio * (acc / c as f64).sqrt())
}

/// Angle between two spectra, computed as atan2(|a x b|, a . b).
///
/// The cross-norm uses Lagrange's identity so that parallel spectra give an
/// exact zero instead of the ~1e-8 floor of `acos` near 1.
pub(crate) fn spectral_angle(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let mut cross = 0.0;
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            let t = a[i] * b[j] - a[j] * b[i];
            cross += t * t;
        }
    }
    cross.sqrt().atan2(dot)
}

/// Spectral angle statistics: mean angle plus the number of skipped pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamResult {
    pub angle: f64,
    pub zero_norm_pixels: usize,
}

pub fn sam_detailed(fused: &Raster, reference: &Raster, cfg: &MetricConfig) -> Result<SamResult> {
    check_pair("SAM", fused, reference)?;
    let c = reference.channels();
    if c < 2 {
        return Err(Error::metric("SAM", "needs at least two bands"));
    }
    let mut total = 0.0;
    let mut valid = 0usize;
    let mut skipped = 0usize;
    for (f, r) in fused.data().chunks_exact(c).zip(reference.data().chunks_exact(c)) {
        if f.iter().all(|v| *v == 0.0) || r.iter().all(|v| *v == 0.0) {
            skipped += 1;
            continue;
        }
        total += spectral_angle(r, f);
        valid += 1;
    }
    if valid == 0 {
        return Err(Error::metric("SAM", "every pixel has a zero spectrum"));
    }
    let mean = total / valid as f64;
    Ok(SamResult {
        angle: match cfg.sam_unit {
            AngleUnit::Radians => mean,
            AngleUnit::Degrees => mean.to_degrees(),
        },
        zero_norm_pixels: skipped,
    })
}

/// Mean spectral angle over pixels with nonzero spectra.
pub fn sam(fused: &Raster, reference: &Raster, cfg: &MetricConfig) -> Result<f64> {
    sam_detailed(fused, reference, cfg).map(|s| s.angle)
}

/// Weighted first and second moments of two samples over one window.
#[derive(Debug, Clone, Copy)]
struct Moments {
    mx: f64,
    my: f64,
    vx: f64,
    vy: f64,
    cxy: f64,
}

/// Moments over the window at (y0, x0) with separable weights `wy`, `wx`
/// (each summing to one). Variances are population (biased) estimates.
fn window_moments(
    a: &[f64],
    b: &[f64],
    width: usize,
    y0: usize,
    x0: usize,
    wy: &[f64],
    wx: &[f64],
) -> Moments {
    let (mut mx, mut my) = (0.0, 0.0);
    for (j, wj) in wy.iter().enumerate() {
        let row = (y0 + j) * width + x0;
        for (i, wi) in wx.iter().enumerate() {
            let w = wj * wi;
            mx += w * a[row + i];
            my += w * b[row + i];
        }
    }
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for (j, wj) in wy.iter().enumerate() {
        let row = (y0 + j) * width + x0;
        for (i, wi) in wx.iter().enumerate() {
            let w = wj * wi;
            let (dx, dy) = (a[row + i] - mx, b[row + i] - my);
            vx += w * dx * dx;
            vy += w * dy * dy;
            cxy += w * dx * dy;
        }
    }
    Moments { mx, my, vx, vy, cxy }
}

/// Wang-Bovik Q for one window, with the usual conventions for flat windows.
fn q_index(m: &Moments) -> f64 {
    let var_sum = m.vx + m.vy;
    let mean_sq = m.mx * m.mx + m.my * m.my;
    if var_sum == 0.0 && mean_sq == 0.0 {
        1.0
    } else if var_sum == 0.0 {
        2.0 * m.mx * m.my / mean_sq
    } else if mean_sq == 0.0 {
        2.0 * m.cxy / var_sum
    } else {
        4.0 * m.cxy * m.mx * m.my / (var_sum * mean_sq)
    }
}

/// Universal image quality index averaged over windows and bands.
pub fn uiqi(fused: &Raster, reference: &Raster, cfg: &MetricConfig) -> Result<f64> {
    check_pair("UIQI", fused, reference)?;
    let (h, w, c) = reference.shape();
    let (wh, ww) = match cfg.uiqi_mode {
        UiqiMode::Windowed => (cfg.uiqi_window, cfg.uiqi_window),
        UiqiMode::Global => (h, w),
    };
    if h < wh || w < ww {
        return Err(Error::metric(
            "UIQI",
            format!("{h}x{w} image smaller than {wh}x{ww} window"),
        ));
    }
    let wy = vec![1.0 / wh as f64; wh];
    let wx = vec![1.0 / ww as f64; ww];
    let mut total = 0.0;
    let mut count = 0usize;
    for b in 0..c {
        let (x, y) = (reference.band(b), fused.band(b));
        for y0 in 0..=h - wh {
            for x0 in 0..=w - ww {
                total += q_index(&window_moments(&x, &y, w, y0, x0, &wy, &wx));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Structural similarity with a Gaussian window, averaged over valid windows
/// and bands.
pub fn ssim(fused: &Raster, reference: &Raster, cfg: &MetricConfig) -> Result<f64> {
    check_pair("SSIM", fused, reference)?;
    let (h, w, c) = reference.shape();
    let win = cfg.ssim_window;
    if h < win || w < win {
        return Err(Error::metric(
            "SSIM",
            format!("{h}x{w} image smaller than {win}x{win} window"),
        ));
    }
    let kernel = ssim_kernel(win, cfg.ssim_sigma);
    let (c1, c2) = (cfg.ssim_c1, cfg.ssim_c2);
    let mut total = 0.0;
    let mut count = 0usize;
    for b in 0..c {
        let (x, y) = (reference.band(b), fused.band(b));
        for y0 in 0..=h - win {
            for x0 in 0..=w - win {
                let m = window_moments(&x, &y, w, y0, x0, &kernel, &kernel);
                let num = (2.0 * m.mx * m.my + c1) * (2.0 * m.cxy + c2);
                let den = (m.mx * m.mx + m.my * m.my + c1) * (m.vx + m.vy + c2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Normalized 1-D Gaussian of exactly `size` taps.
pub(crate) fn ssim_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// 8-connected Laplacian with replicate borders.
pub(crate) fn laplacian(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        plane[yy * w + xx]
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut neigh = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if dy != 0 || dx != 0 {
                        neigh += at(y + dy, x + dx);
                    }
                }
            }
            out[y as usize * w + x as usize] = 8.0 * at(y, x) - neigh;
        }
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va.sqrt() * vb.sqrt()))
}

/// Spatial correlation coefficient of Laplacian-filtered bands.
pub fn scc(fused: &Raster, reference: &Raster) -> Result<f64> {
    check_pair("SCC", fused, reference)?;
    let (h, w, c) = reference.shape();
    let mut total = 0.0;
    for b in 0..c {
        let lf = laplacian(&fused.band(b), h, w);
        let lr = laplacian(&reference.band(b), h, w);
        total += pearson(&lf, &lr).ok_or_else(|| {
            Error::metric("SCC", format!("band {b} has no high-frequency content"))
        })?;
    }
    Ok(total / c as f64)
}

/// The five indices for one (fused, reference) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ergas: f64,
    pub sam: f64,
    pub uiqi: f64,
    pub scc: f64,
    pub ssim: f64,
}

impl MetricReport {
    /// Values a perfect reconstruction scores.
    pub const IDEAL: MetricReport = MetricReport {
        ergas: 0.0,
        sam: 0.0,
        uiqi: 1.0,
        scc: 1.0,
        ssim: 1.0,
    };

    pub const COLUMNS: [&'static str; 5] = ["ERGAS", "SAM", "UIQI", "SCC", "SSIM"];

    pub fn values(&self) -> [f64; 5] {
        [self.ergas, self.sam, self.uiqi, self.scc, self.ssim]
    }

    pub fn from_values(v: [f64; 5]) -> Self {
        Self {
            ergas: v[0],
            sam: v[1],
            uiqi: v[2],
            scc: v[3],
            ssim: v[4],
        }
    }

    /// Element-wise mean of several reports.
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let mut acc = [0.0; 5];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        Some(Self::from_values(acc.map(|a| a / reports.len() as f64)))
    }

    pub fn is_within_ranges(&self) -> bool {
        let unit = |v: f64| (-1.0..=1.0).contains(&v);
        self.values().iter().all(|v| v.is_finite())
            && self.ergas >= 0.0
            && self.sam >= 0.0
            && unit(self.uiqi)
            && unit(self.scc)
            && unit(self.ssim)
    }
}

/// Runs all five metrics after a single shape check.
pub fn evaluate(fused: &Raster, reference: &Raster, cfg: &MetricConfig) -> Result<MetricReport> {
    cfg.validate()?;
    if fused.shape() != reference.shape() {
        return Err(Error::DimensionMismatch {
            expected: reference.shape(),
            found: fused.shape(),
        });
    }
    Ok(MetricReport {
        ergas: ergas(fused, reference, cfg)?,
        sam: sam(fused, reference, cfg)?,
        uiqi: uiqi(fused, reference, cfg)?,
        scc: scc(fused, reference)?,
        ssim: ssim(fused, reference, cfg)?,
    })
}

/// Decimal places used by [`format_table`].
pub const TABLE_PRECISION: usize = 4;

/// Plain-text table: a header, one row per method, then the ideal row.
pub fn format_table(rows: &[(String, MetricReport)], include_ideal: bool) -> String {
    let name_w = rows
        .iter()
        .map(|(n, _)| n.len())
        .chain(["Methods".len(), "Reference".len()])
        .max()
        .unwrap_or(7);
    let col_w = TABLE_PRECISION + 6;
    let mut out = String::new();
    let _ = write!(out, "{:<name_w$}", "Methods");
    for c in MetricReport::COLUMNS {
        let _ = write!(out, " {c:>col_w$}");
    }
    out.push('\n');
    let mut push_row = |name: &str, r: &MetricReport| {
        let _ = write!(out, "{name:<name_w$}");
        for v in r.values() {
            let _ = write!(out, " {:>col_w$.prec$}", v, prec = TABLE_PRECISION);
        }
        out.push('\n');
    };
    for (name, r) in rows {
        push_row(name, r);
    }
    if include_ideal {
        push_row("Reference", &MetricReport::IDEAL);
    }
    out
}

/// Parses a table produced by [`format_table`]. The ideal row is returned
/// like any other.
pub fn parse_table(text: &str) -> Result<Vec<(String, MetricReport)>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Config("empty metric table".into()))?
        .split_whitespace()
        .collect();
    if header.len() != 6 || header[0] != "Methods" || header[1..] != MetricReport::COLUMNS {
        return Err(Error::Config(format!("unexpected table header {header:?}")));
    }
    lines
        .map(|line| {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() < 6 {
                return Err(Error::Config(format!("short table row {line:?}")));
            }
            let split = fields.len() - 5;
            let mut v = [0.0; 5];
            for (slot, f) in v.iter_mut().zip(&fields[split..]) {
                *slot = f
                    .parse()
                    .map_err(|_| Error::Config(format!("bad number {f:?} in {line:?}")))?;
            }
            Ok((fields[..split].join(" "), MetricReport::from_values(v)))
        })
        .collect()
}

/// One JSON object per line, with a `method` field.
pub fn format_records(rows: &[(String, MetricReport)]) -> String {
    let mut out = String::new();
    for (name, r) in rows {
        let rec = serde_json::json!({
            "method": name,
            "ergas": r.ergas,
            "sam": r.sam,
            "uiqi": r.uiqi,
            "scc": r.scc,
            "ssim": r.ssim,
        });
        out.push_str(&rec.to_string());
        out.push('\n');
    }
    out
}

pub fn parse_records(text: &str) -> Result<Vec<(String, MetricReport)>> {
    #[derive(Deserialize)]
    struct Record {
        method: String,
        #[serde(flatten)]
        report: MetricReport,
    }
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let r: Record = serde_json::from_str(l)
                .map_err(|e| Error::Config(format!("bad metric record {l:?}: {e}")))?;
            Ok((r.method, r.report))
        })
        .collect()
}
