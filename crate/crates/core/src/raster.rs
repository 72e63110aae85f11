//! The `Raster` image type shared by every stage of the pipeline.
//!
//! Samples are stored band-interleaved-by-pixel: the value of band `c` at row
//! `y`, column `x` lives at `(y * width + x) * channels + c`.

use crate::error::{Error, Result};

/// Channel counts a `Raster` may carry: PAN, false-color preview, MS.
pub const SUPPORTED_CHANNELS: [usize; 3] = [1, 3, 4];

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
    source_bit_depth: u32,
    normalized: bool,
}

impl Raster {
    /// Builds a raster holding raw sensor values at `source_bit_depth`.
    pub fn from_raw(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
        source_bit_depth: u32,
    ) -> Result<Self> {
        let mut r = Self::new(height, width, channels, data)?;
        if source_bit_depth == 0 || source_bit_depth > 16 {
            return Err(Error::InvalidRaster(format!(
                "unsupported bit depth {source_bit_depth}"
            )));
        }
        r.source_bit_depth = source_bit_depth;
        r.normalized = false;
        Ok(r)
    }

    /// Builds a raster whose values are already on the [0, 1] scale.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidRaster(format!(
                "empty raster {height}x{width}"
            )));
        }
        if !SUPPORTED_CHANNELS.contains(&channels) {
            return Err(Error::UnsupportedChannels(channels));
        }
        if data.len() != height * width * channels {
            return Err(Error::InvalidRaster(format!(
                "{} samples for a {height}x{width}x{channels} raster",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidRaster(format!("non-finite sample {v}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
            source_bit_depth: 16,
            normalized: true,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Stacks single-band rasters into one multi-band raster.
    pub fn stack(bands: &[Raster]) -> Result<Self> {
        let first = bands
            .first()
            .ok_or_else(|| Error::InvalidRaster("no bands to stack".into()))?;
        for b in bands {
            if b.channels != 1 {
                return Err(Error::InvalidRaster(format!(
                    "stacked band has {} channels",
                    b.channels
                )));
            }
            if (b.height, b.width) != (first.height, first.width) {
                return Err(Error::DimensionMismatch {
                    expected: (first.height, first.width, 1),
                    found: (b.height, b.width, 1),
                });
            }
        }
        let n = bands.len();
        if !SUPPORTED_CHANNELS.contains(&n) {
            return Err(Error::UnsupportedChannels(n));
        }
        let mut data = Vec::with_capacity(first.len() * n);
        for i in 0..first.pixel_count() {
            data.extend(bands.iter().map(|b| b.data[i]));
        }
        Ok(Self {
            height: first.height,
            width: first.width,
            channels: n,
            data,
            source_bit_depth: first.source_bit_depth,
            normalized: first.normalized,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn source_bit_depth(&self) -> u32 {
        self.source_bit_depth
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Spectrum of one pixel.
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Copies band `c` out as a row-major plane.
    pub fn band(&self, c: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    /// Rebuilds a raster from row-major planes, one per band.
    pub fn from_bands(height: usize, width: usize, bands: &[Vec<f64>]) -> Result<Self> {
        let channels = bands.len();
        let mut data = vec![0.0; height * width * channels];
        for (c, plane) in bands.iter().enumerate() {
            if plane.len() != height * width {
                return Err(Error::InvalidRaster(format!(
                    "band {c} has {} samples, expected {}",
                    plane.len(),
                    height * width
                )));
            }
            for (i, v) in plane.iter().enumerate() {
                data[i * channels + c] = *v;
            }
        }
        Self::new(height, width, channels, data)
    }

    /// Crops a window; the result inherits bit depth and scale.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width || h == 0 || w == 0 {
            return Err(Error::InvalidRaster(format!(
                "window {h}x{w} at ({y0},{x0}) outside {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(h * w * c);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * c;
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Ok(Self {
            height: h,
            width: w,
            channels: c,
            data,
            source_bit_depth: self.source_bit_depth,
            normalized: self.normalized,
        })
    }

    /// Same geometry, new values; keeps scale metadata.
    pub(crate) fn with_data(&self, height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width * self.channels);
        Self {
            height,
            width,
            channels: self.channels,
            data,
            source_bit_depth: self.source_bit_depth,
            normalized: self.normalized,
        }
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn ensure_same_shape(&self, other: &Raster) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch {
                expected: self.shape(),
                found: other.shape(),
            });
        }
        Ok(())
    }
}

/// Full-scale value of a sensor with `bit_depth` bits.
pub fn full_scale(bit_depth: u32) -> f64 {
    ((1u64 << bit_depth) - 1) as f64
}

/// Divides raw values by the sensor's full-scale value and clamps to [0, 1].
///
/// A raster that is already normalized is returned unchanged.
pub fn normalize(r: &Raster) -> Raster {
    if r.normalized {
        return r.clone();
    }
    let scale = full_scale(r.source_bit_depth);
    let data = r.data.iter().map(|v| (v / scale).clamp(0.0, 1.0)).collect();
    let mut out = r.with_data(r.height, r.width, data);
    out.normalized = true;
    out
}

/// Maps normalized values back to integer sensor counts at `bit_depth`.
pub fn quantize(r: &Raster, bit_depth: u32) -> Vec<u16> {
    if !r.normalized {
        return r
            .data
            .iter()
            .map(|v| v.round().clamp(0.0, u16::MAX as f64) as u16)
            .collect();
    }
    let scale = full_scale(bit_depth);
    r.data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * scale).round() as u16)
        .collect()
}
