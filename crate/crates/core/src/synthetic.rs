//! Seeded synthetic 4-band scenes for tests and the desk-scale experiments.
//!
//! A scene is a Voronoi mosaic of land-cover classes, each with its own
//! spectrum, modulated by shared fine texture and a slow per-band gradient.
//! The matching PAN is the band mean, so PAN carries exactly the spatial
//! detail that the MS bands share.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baselines::intensity;
use crate::error::Result;
use crate::imaging::{DegradeConfig, Sample, degrade};
use crate::raster::Raster;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneConfig {
    pub classes: usize,
    /// Voronoi sites per 64x64 pixels.
    pub site_density: f64,
    /// Amplitude of the shared multiplicative texture.
    pub texture: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            classes: 6,
            site_density: 10.0,
            texture: 0.15,
        }
    }
}

/// Generates an `h` x `w` 4-band scene in [0, 1].
pub fn scene(h: usize, w: usize, seed: u64, cfg: &SceneConfig) -> Raster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spectra: Vec<[f64; 4]> = (0..cfg.classes.max(1))
        .map(|_| std::array::from_fn(|_| rng.random_range(0.1..0.8)))
        .collect();
    let n_sites = ((h * w) as f64 / 4096.0 * cfg.site_density).ceil().max(2.0) as usize;
    let sites: Vec<(f64, f64, usize)> = (0..n_sites)
        .map(|_| {
            (
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..w as f64),
                rng.random_range(0..spectra.len()),
            )
        })
        .collect();
    // (fy, fx, phase) in cycles per pixel; periods of roughly 3 to 12 px.
    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            let f = rng.random_range(1.0 / 12.0..1.0 / 3.0);
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            (f * a.sin(), f * a.cos(), rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let tilt: Vec<(f64, f64)> = (0..4)
        .map(|_| (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)))
        .collect();

    let mut data = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            let (yf, xf) = (y as f64, x as f64);
            let class = sites
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 - yf).powi(2) + (a.1 - xf).powi(2);
                    let db = (b.0 - yf).powi(2) + (b.1 - xf).powi(2);
                    da.total_cmp(&db)
                })
                .map_or(0, |s| s.2);
            let tex: f64 = waves
                .iter()
                .map(|(fy, fx, p)| (std::f64::consts::TAU * (fy * yf + fx * xf) + p).sin())
                .sum::<f64>()
                / waves.len() as f64;
            let gain = 1.0 + cfg.texture * tex;
            let (v, u) = (yf / h.max(1) as f64 - 0.5, xf / w.max(1) as f64 - 0.5);
            for b in 0..4 {
                let base = spectra[class][b] + tilt[b].0 * v + tilt[b].1 * u;
                data.push((base * gain).clamp(0.0, 1.0));
            }
        }
    }
    Raster::new(h, w, 4, data).expect("scene values are finite")
}

/// Band mean as a single-channel PAN raster.
pub fn pan_of(ms: &Raster) -> Raster {
    Raster::new(ms.height(), ms.width(), 1, intensity(ms)).expect("band mean is finite")
}

/// Sensor-like pair: PAN at full resolution, MS degraded by `scale`.
pub fn sensor_pair(h: usize, w: usize, scale: usize, seed: u64) -> Result<(Raster, Raster)> {
    let hr = scene(h, w, seed, &SceneConfig::default());
    let ms = degrade(&hr, &DegradeConfig::with_scale(scale))?;
    Ok((pan_of(&hr), ms))
}

/// Reduced-resolution sample whose reference is `hr` itself.
///
/// Equivalent to extracting a patch from a [`sensor_pair`] built on a scene
/// `scale` times larger, without generating it.
pub fn wald_sample(hr: &Raster, scale: usize) -> Result<Sample> {
    let cfg = DegradeConfig::with_scale(scale);
    let lrms = degrade(hr, &cfg)?;
    Sample::new(lrms, pan_of(hr), hr.clone(), scale)
}

/// `n` independent `size` x `size` samples from consecutive seeds.
pub fn samples(n: usize, size: usize, scale: usize, seed: u64) -> Result<Vec<Sample>> {
    (0..n as u64)
        .map(|i| wald_sample(&scene(size, size, seed.wrapping_add(i), &SceneConfig::default()), scale))
        .collect()
}
