//! On-disk sample archives written by `prepare`.
//!
//! ```text
//! <dir>/archive.json                    ArchiveManifest
//! <dir>/sample_00000/lrms.psrk          4 bands, patch/scale^2 square
//! <dir>/sample_00000/pan.psrk           1 band,  patch/scale square
//! <dir>/sample_00000/lrms_up.psrk       4 bands, patch/scale square
//! <dir>/sample_00000/hrms.psrk          4 bands, patch/scale square
//! <dir>/sample_00001/...
//! ```
//!
//! Rasters are band-interleaved PSRK files quantized to 16 bits.

use std::path::{Path, PathBuf};

use dats_core::io::{self, BandLayout};
use dats_core::raster::normalize;
use dats_core::{Raster, Sample};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const MANIFEST: &str = "archive.json";
pub const FORMAT_VERSION: u32 = 1;
pub const STORED_BIT_DEPTH: u32 = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveManifest {
    pub version: u32,
    /// Free-form scene tag used to split favorable and typical comparisons.
    pub source: String,
    pub scale: usize,
    pub patch: usize,
    pub stride: usize,
    pub samples: usize,
    pub pan: PathBuf,
    pub ms: PathBuf,
}

fn sample_dir(root: &Path, i: usize) -> PathBuf {
    root.join(format!("sample_{i:05}"))
}

fn stored(r: &Raster) -> Result<Raster, CliError> {
    Ok(Raster::from_raw(
        r.height(),
        r.width(),
        r.channels(),
        dats_core::raster::quantize(r, STORED_BIT_DEPTH).into_iter().map(f64::from).collect(),
        STORED_BIT_DEPTH,
    )?)
}

pub fn write(root: &Path, manifest: &ArchiveManifest, samples: &[Sample]) -> Result<(), CliError> {
    std::fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
    for (i, s) in samples.iter().enumerate() {
        let dir = sample_dir(root, i);
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        for (name, r) in [("lrms", &s.lrms), ("pan", &s.pan), ("lrms_up", &s.lrms_up), ("hrms", &s.hrms_ref)] {
            io::save_raster(&dir.join(format!("{name}.psrk")), &stored(r)?, BandLayout::Interleaved)?;
        }
    }
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    let path = root.join(MANIFEST);
    std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
}

pub fn read_manifest(root: &Path) -> Result<ArchiveManifest, CliError> {
    let path = root.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let m: ArchiveManifest = serde_json::from_str(&text)
        .map_err(|e| CliError::InvalidData(format!("{}: {e}", path.display())))?;
    if m.version != FORMAT_VERSION {
        return Err(CliError::InvalidData(format!(
            "{}: unsupported archive version {}",
            path.display(),
            m.version
        )));
    }
    Ok(m)
}

pub fn read(root: &Path) -> Result<(ArchiveManifest, Vec<Sample>), CliError> {
    let m = read_manifest(root)?;
    let load = |dir: &Path, name: &str| -> Result<Raster, CliError> {
        Ok(normalize(&io::load_raster(&dir.join(format!("{name}.psrk")), BandLayout::Interleaved)?))
    };
    let mut samples = Vec::with_capacity(m.samples);
    for i in 0..m.samples {
        let dir = sample_dir(root, i);
        let s = Sample {
            lrms: load(&dir, "lrms")?,
            pan: load(&dir, "pan")?,
            lrms_up: load(&dir, "lrms_up")?,
            hrms_ref: load(&dir, "hrms")?,
        };
        s.check(m.scale)?;
        samples.push(s);
    }
    Ok((m, samples))
}
