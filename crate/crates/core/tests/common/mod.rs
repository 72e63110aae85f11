//! Brute-force reference implementations and fixtures shared by the
//! integration tests and the acceptance runner. Written straight from the
//! metric definitions, without reusing library internals.

#![allow(dead_code)]

use dats_core::Raster;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_raster(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Raster {
    Raster::new(h, w, c, (0..h * w * c).map(|_| rng.random_range(0.02..1.0)).collect()).unwrap()
}

/// Random 16..=32 square-ish 4-band pair, the second a noisy copy of the first.
pub fn random_pair(seed: u64) -> (Raster, Raster) {
    let mut r = rng(seed);
    let h = r.random_range(16..=32);
    let w = r.random_range(16..=32);
    let reference = random_raster(&mut r, h, w, 4);
    let noise = r.random_range(0.01..0.3);
    let fused: Vec<f64> = reference
        .data()
        .iter()
        .map(|v| (v + noise * r.random_range(-1.0..1.0)).clamp(0.0, 1.0))
        .collect();
    (Raster::new(h, w, 4, fused).unwrap(), reference)
}

fn band_mean(r: &Raster, b: usize) -> f64 {
    let mut s = 0.0;
    for y in 0..r.height() {
        for x in 0..r.width() {
            s += r.get(y, x, b);
        }
    }
    s / r.pixel_count() as f64
}

pub fn ergas(fused: &Raster, reference: &Raster, ratio: f64) -> f64 {
    let n = reference.pixel_count() as f64;
    let c = reference.channels();
    let mut acc = 0.0;
    for b in 0..c {
        let mut se = 0.0;
        for y in 0..reference.height() {
            for x in 0..reference.width() {
                se += (fused.get(y, x, b) - reference.get(y, x, b)).powi(2);
            }
        }
        let rmse = (se / n).sqrt();
        acc += (rmse / band_mean(reference, b)).powi(2);
    }
    100.0 * ratio * (acc / c as f64).sqrt()
}

pub fn sam(fused: &Raster, reference: &Raster) -> f64 {
    let mut total = 0.0;
    let mut n = 0.0;
    for y in 0..reference.height() {
        for x in 0..reference.width() {
            let (a, b) = (fused.pixel(y, x), reference.pixel(y, x));
            let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
            let na = a.iter().map(|p| p * p).sum::<f64>().sqrt();
            let nb = b.iter().map(|p| p * p).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                continue;
            }
            total += (dot / (na * nb)).clamp(-1.0, 1.0).acos();
            n += 1.0;
        }
    }
    total / n
}

/// Wang-Bovik Q on 8x8 windows, written as the product of its three factors.
pub fn uiqi(fused: &Raster, reference: &Raster, win: usize) -> f64 {
    let (h, w, c) = reference.shape();
    let mut total = 0.0;
    let mut count = 0.0;
    let nw = (win * win) as f64;
    for b in 0..c {
        for y0 in 0..=h - win {
            for x0 in 0..=w - win {
                let (mut sx, mut sy) = (0.0, 0.0);
                for y in y0..y0 + win {
                    for x in x0..x0 + win {
                        sx += reference.get(y, x, b);
                        sy += fused.get(y, x, b);
                    }
                }
                let (mx, my) = (sx / nw, sy / nw);
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for y in y0..y0 + win {
                    for x in x0..x0 + win {
                        let dx = reference.get(y, x, b) - mx;
                        let dy = fused.get(y, x, b) - my;
                        vx += dx * dx;
                        vy += dy * dy;
                        cxy += dx * dy;
                    }
                }
                let (vx, vy, cxy) = (vx / nw, vy / nw, cxy / nw);
                let (sdx, sdy) = (vx.sqrt(), vy.sqrt());
                let corr = cxy / (sdx * sdy);
                let lum = 2.0 * mx * my / (mx * mx + my * my);
                let con = 2.0 * sdx * sdy / (vx + vy);
                total += corr * lum * con;
                count += 1.0;
            }
        }
    }
    total / count
}

/// SSIM with an explicit 2-D Gaussian window over valid positions.
pub fn ssim(fused: &Raster, reference: &Raster, win: usize, sigma: f64, c1: f64, c2: f64) -> f64 {
    let (h, w, c) = reference.shape();
    let r = (win / 2) as f64;
    let mut g = vec![0.0; win * win];
    for i in 0..win {
        for j in 0..win {
            let (di, dj) = (i as f64 - r, j as f64 - r);
            g[i * win + j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
        }
    }
    let gs: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= gs);
    let mut total = 0.0;
    let mut count = 0.0;
    for b in 0..c {
        for y0 in 0..=h - win {
            for x0 in 0..=w - win {
                let (mut mx, mut my, mut exx, mut eyy, mut exy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..win {
                    for j in 0..win {
                        let wt = g[i * win + j];
                        let a = reference.get(y0 + i, x0 + j, b);
                        let f = fused.get(y0 + i, x0 + j, b);
                        mx += wt * a;
                        my += wt * f;
                        exx += wt * a * a;
                        eyy += wt * f * f;
                        exy += wt * a * f;
                    }
                }
                let (vx, vy, cxy) = (exx - mx * mx, eyy - my * my, exy - mx * my);
                total += (2.0 * mx * my + c1) * (2.0 * cxy + c2)
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1.0;
            }
        }
    }
    total / count
}

/// Laplacian by explicit 3x3 kernel with clamped indexing, then Pearson.
pub fn scc(fused: &Raster, reference: &Raster) -> f64 {
    const K: [[f64; 3]; 3] = [[-1.0, -1.0, -1.0], [-1.0, 8.0, -1.0], [-1.0, -1.0, -1.0]];
    let (h, w, c) = reference.shape();
    let lap = |r: &Raster, b: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut s = 0.0;
                for (i, row) in K.iter().enumerate() {
                    for (j, k) in row.iter().enumerate() {
                        let yy = (y + i as i64 - 1).clamp(0, h as i64 - 1) as usize;
                        let xx = (x + j as i64 - 1).clamp(0, w as i64 - 1) as usize;
                        s += k * r.get(yy, xx, b);
                    }
                }
                out.push(s);
            }
        }
        out
    };
    let mut total = 0.0;
    for b in 0..c {
        let (a, r) = (lap(fused, b), lap(reference, b));
        let n = a.len() as f64;
        let (ma, mr) = (a.iter().sum::<f64>() / n, r.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(&r).map(|(p, q)| (p - ma) * (q - mr)).sum();
        let va: f64 = a.iter().map(|p| (p - ma).powi(2)).sum();
        let vr: f64 = r.iter().map(|q| (q - mr).powi(2)).sum();
        total += cov / (va * vr).sqrt();
    }
    total / c as f64
}

pub mod net;
