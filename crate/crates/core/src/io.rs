//! Raster file formats.
//!
//! The portable fixture format is:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "PSRK"
//! 4       4     height      (u32, little-endian)
//! 8       4     width       (u32, little-endian)
//! 12      4     channels    (u32, little-endian)
//! 16      4     bit depth   (u32, little-endian)
//! 20      2*N   samples     (u16, little-endian), N = height*width*channels
//! ```
//!
//! Samples are row-major. With [`BandLayout::Interleaved`] the bands of a
//! pixel are adjacent; with [`BandLayout::Sequential`] each band is stored as
//! a complete plane before the next one.
//!
//! GeoTIFF input is limited to uncompressed (or losslessly compressed, when
//! the decoder supports it) 8/16-bit integer images, striped or tiled, chunky
//! or planar. Geospatial tags are ignored.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Read, Write};
use std::path::Path;

use tiff::decoder::{Decoder, DecodingResult, Limits};
use tiff::tags::{PlanarConfiguration, Tag};

use crate::error::{Error, Result};
use crate::raster::{quantize, Raster};

pub const PSRK_MAGIC: &[u8; 4] = b"PSRK";
pub const PSRK_HEADER_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BandLayout {
    /// Band-interleaved by pixel.
    #[default]
    Interleaved,
    /// Band-sequential planes.
    Sequential,
}

/// Reads a raster without normalizing it.
pub fn load_raster(path: &Path, layout: BandLayout) -> Result<Raster> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(PSRK_MAGIC) {
        decode_psrk(&bytes, layout).map_err(|reason| Error::format(path, reason))
    } else if bytes.starts_with(b"II*\0") || bytes.starts_with(b"MM\0*") {
        decode_tiff(&bytes).map_err(|reason| Error::format(path, reason))
    } else {
        Err(Error::format(path, "unrecognized raster signature"))
    }
}

/// Loads one single-band file per band and stacks them in order.
pub fn load_band_stack(paths: &[&Path]) -> Result<Raster> {
    let bands = paths
        .iter()
        .map(|p| load_raster(p, BandLayout::Interleaved))
        .collect::<Result<Vec<_>>>()?;
    Raster::stack(&bands)
}

/// Writes a raster in the portable format.
///
/// Normalized rasters are quantized at their recorded bit depth; raw rasters
/// are written as-is.
pub fn save_raster(path: &Path, r: &Raster, layout: BandLayout) -> Result<()> {
    let bytes = encode_psrk(r, layout);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn encode_psrk(r: &Raster, layout: BandLayout) -> Vec<u8> {
    let (h, w, c) = r.shape();
    let mut out = Vec::with_capacity(PSRK_HEADER_LEN + 2 * r.len());
    out.extend_from_slice(PSRK_MAGIC);
    for v in [h as u32, w as u32, c as u32, r.source_bit_depth()] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let samples = quantize(r, r.source_bit_depth());
    match layout {
        BandLayout::Interleaved => {
            for s in &samples {
                out.extend_from_slice(&s.to_le_bytes());
            }
        }
        BandLayout::Sequential => {
            for band in 0..c {
                for s in samples.iter().skip(band).step_by(c) {
                    out.extend_from_slice(&s.to_le_bytes());
                }
            }
        }
    }
    out
}

pub fn decode_psrk(bytes: &[u8], layout: BandLayout) -> std::result::Result<Raster, String> {
    if bytes.len() < PSRK_HEADER_LEN || &bytes[..4] != PSRK_MAGIC {
        return Err("truncated header".into());
    }
    let mut header = [0u32; 4];
    for (i, v) in header.iter_mut().enumerate() {
        let at = 4 + 4 * i;
        *v = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    }
    let [h, w, c, depth] = header.map(|v| v as usize);
    let n = h
        .checked_mul(w)
        .and_then(|p| p.checked_mul(c))
        .ok_or("header dimensions overflow")?;
    let payload = &bytes[PSRK_HEADER_LEN..];
    if payload.len() != 2 * n {
        return Err(format!(
            "payload of {} bytes does not match {h}x{w}x{c} u16 samples",
            payload.len()
        ));
    }
    let raw: Vec<f64> = payload
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]) as f64)
        .collect();
    let data = match layout {
        BandLayout::Interleaved => raw,
        BandLayout::Sequential => {
            let plane = h * w;
            let mut data = vec![0.0; n];
            for band in 0..c {
                for i in 0..plane {
                    data[i * c + band] = raw[band * plane + i];
                }
            }
            data
        }
    };
    Raster::from_raw(h, w, c, data, depth as u32).map_err(|e| e.to_string())
}

fn decode_tiff(bytes: &[u8]) -> std::result::Result<Raster, String> {
    let mut dec = Decoder::new(Cursor::new(bytes))
        .map_err(|e| e.to_string())?
        .with_limits(Limits::unlimited());
    let (w, h) = dec.dimensions().map_err(|e| e.to_string())?;
    let (h, w) = (h as usize, w as usize);
    let samples_per_pixel = dec
        .find_tag_unsigned::<u16>(Tag::SamplesPerPixel)
        .map_err(|e| e.to_string())?
        .unwrap_or(1) as usize;
    let planar = dec
        .find_tag_unsigned::<u16>(Tag::PlanarConfiguration)
        .map_err(|e| e.to_string())?
        .and_then(PlanarConfiguration::from_u16)
        .unwrap_or(PlanarConfiguration::Chunky);
    let bits = dec
        .find_tag_unsigned_vec::<u16>(Tag::BitsPerSample)
        .map_err(|e| e.to_string())?
        .unwrap_or_else(|| vec![1]);
    if bits.iter().any(|b| *b != bits[0]) {
        return Err(format!("mixed bits per sample {bits:?}"));
    }

    let mut result = DecodingResult::U8(vec![]);
    dec.read_image_to_buffer(&mut result)
        .map_err(|e| e.to_string())?;
    let raw: Vec<f64> = match result {
        DecodingResult::U8(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::U16(v) => v.into_iter().map(f64::from).collect(),
        _ => return Err("only 8- and 16-bit unsigned samples are supported".into()),
    };
    let n = h * w * samples_per_pixel;
    if raw.len() != n {
        return Err(format!(
            "decoded {} samples, expected {h}x{w}x{samples_per_pixel}",
            raw.len()
        ));
    }
    let data = if planar == PlanarConfiguration::Planar && samples_per_pixel > 1 {
        let plane = h * w;
        let mut data = vec![0.0; n];
        for band in 0..samples_per_pixel {
            for i in 0..plane {
                data[i * samples_per_pixel + band] = raw[band * plane + i];
            }
        }
        data
    } else {
        raw
    };
    Raster::from_raw(h, w, samples_per_pixel, data, bits[0] as u32).map_err(|e| e.to_string())
}

/// Writes an 8-bit RGB or grayscale PNG from a normalized raster.
pub fn save_png(path: &Path, r: &Raster) -> Result<()> {
    let color = match r.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        n => return Err(Error::UnsupportedChannels(n)),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), r.width() as u32, r.height() as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(to_io)?;
    let bytes: Vec<u8> = r
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    writer.write_image_data(&bytes).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

/// Reads back an 8-bit PNG written by [`save_png`].
pub fn load_png(path: &Path) -> Result<Raster> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let dec = png::Decoder::new(BufReader::new(file));
    let mut reader = dec
        .read_info()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let channels = info.color_type.samples();
    let data = buf[..info.buffer_size()]
        .iter()
        .map(|v| *v as f64)
        .collect();
    Raster::from_raw(
        info.height as usize,
        info.width as usize,
        channels,
        data,
        8,
    )
}

/// Reads the first four bytes of a file, for format sniffing.
pub fn sniff(path: &Path) -> Result<[u8; 4]> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    Ok(magic)
}
