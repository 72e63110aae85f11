//! Portable binary checkpoints.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic      8 bytes  "DATSCKPT"
//! version    u32      currently 1
//! n_meta     u32
//! n_meta x { key: u32 len + UTF-8, value: u32 len + UTF-8 }
//! n_tensors  u32
//! n_tensors x { name: u32 len + UTF-8, ndim: u32, dims: ndim x u64, values: prod(dims) x f64 }
//! ```
//!
//! The `manifest` metadata entry holds the architecture as JSON. Model
//! parameters use the names from [`DatsModel::params`]; optimizer moments, when
//! present, are stored as `adam.m.<name>` and `adam.v.<name>`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{DatsModel, Manifest};
use crate::nn::Tensor;
use crate::trainer::{AdamState, TrainState};

pub const MAGIC: &[u8; 8] = b"DATSCKPT";
pub const VERSION: u32 = 1;

/// Decoded container contents, before interpretation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            meta.insert(k, v);
        }
        let n = r.u32()?;
        let mut tensors = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let count: usize = shape.iter().product();
            let raw = r.take(count.checked_mul(8).ok_or("tensor too large")?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor { shape, data }));
        }
        if r.at != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.at));
        }
        Ok(Self { meta, tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.at.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.at))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }
}

/// Packs a model (and optionally training state) into a container.
pub fn to_container(state: &TrainState, extra_meta: &BTreeMap<String, String>) -> Container {
    let model = &state.model;
    let mut meta = extra_meta.clone();
    meta.insert(
        "manifest".into(),
        serde_json::to_string(&model.manifest).expect("manifest serializes"),
    );
    meta.insert("train.step".into(), state.step.to_string());
    meta.insert("adam.t".into(), state.adam.t.to_string());
    let params = model.params();
    let mut tensors: Vec<(String, Tensor)> = params
        .iter()
        .map(|p| (p.name.clone(), p.tensor.clone()))
        .collect();
    if state.adam.t > 0 {
        for (p, (m, v)) in params.iter().zip(state.adam.m.iter().zip(&state.adam.v)) {
            tensors.push((
                format!("adam.m.{}", p.name),
                Tensor { shape: p.tensor.shape.clone(), data: m.clone() },
            ));
            tensors.push((
                format!("adam.v.{}", p.name),
                Tensor { shape: p.tensor.shape.clone(), data: v.clone() },
            ));
        }
    }
    Container { meta, tensors }
}

/// Rebuilds training state; missing optimizer moments start at zero.
pub fn from_container(c: &Container) -> std::result::Result<TrainState, String> {
    let manifest: Manifest = serde_json::from_str(
        c.meta.get("manifest").ok_or("checkpoint has no manifest")?,
    )
    .map_err(|e| format!("bad manifest: {e}"))?;
    let mut model = DatsModel::zeros(manifest).map_err(|e| e.to_string())?;
    let by_name: BTreeMap<&str, &Tensor> =
        c.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let names = model.param_names();
    for (name, slot) in names.iter().zip(model.params_mut()) {
        let t = by_name
            .get(name.as_str())
            .ok_or_else(|| format!("missing tensor {name}"))?;
        if t.shape != slot.shape {
            return Err(format!(
                "tensor {name} has shape {:?}, manifest expects {:?}",
                t.shape, slot.shape
            ));
        }
        slot.data.clone_from(&t.data);
    }
    let parse = |key: &str| -> std::result::Result<u64, String> {
        c.meta
            .get(key)
            .map(|v| v.parse::<u64>().map_err(|e| format!("{key}: {e}")))
            .unwrap_or(Ok(0))
    };
    let step = parse("train.step")? as usize;
    let mut adam = AdamState::new(&model);
    adam.t = parse("adam.t")?;
    if adam.t > 0 {
        for (i, name) in names.iter().enumerate() {
            let m = by_name
                .get(format!("adam.m.{name}").as_str())
                .ok_or_else(|| format!("missing optimizer moment for {name}"))?;
            let v = by_name
                .get(format!("adam.v.{name}").as_str())
                .ok_or_else(|| format!("missing optimizer moment for {name}"))?;
            if m.data.len() != adam.m[i].len() || v.data.len() != adam.v[i].len() {
                return Err(format!("optimizer moment for {name} has wrong size"));
            }
            adam.m[i].clone_from(&m.data);
            adam.v[i].clone_from(&v.data);
        }
    }
    Ok(TrainState { model, adam, step })
}

pub fn save_state(path: &Path, state: &TrainState, extra_meta: &BTreeMap<String, String>) -> Result<()> {
    let bytes = to_container(state, extra_meta).encode();
    // Write-then-rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_container(path: &Path) -> Result<Container> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Container::decode(&bytes).map_err(|r| Error::format(path, r))
}

pub fn load_state(path: &Path) -> Result<TrainState> {
    from_container(&load_container(path)?).map_err(|r| Error::format(path, r))
}

pub fn save_model(path: &Path, model: &DatsModel) -> Result<()> {
    save_state(path, &TrainState::fresh(model.clone()), &BTreeMap::new())
}

pub fn load_model(path: &Path) -> Result<DatsModel> {
    load_state(path).map(|s| s.model)
}
