//! Single-file container: `DST1`, a little-endian `u64` manifest length,
//! the JSON manifest, then every tensor as little-endian `f64` in manifest
//! order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{ModelConfig, SlimModel};
use crate::error::{DstError, Result};

pub const MAGIC: &[u8; 4] = b"DST1";
pub const DTYPE: &str = "f64-le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
    pub slicing_tag: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grids {
    pub widths: Vec<usize>,
    pub depths: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub grids: Grids,
    pub tensors: Vec<TensorRecord>,
    /// Free-form provenance, e.g. `"teacher"`, `"dst"` or `"export a(16, 2)"`.
    #[serde(default)]
    pub note: String,
}

pub fn manifest_of(model: &SlimModel, note: &str) -> Manifest {
    let mut offset = 0u64;
    let tensors = model
        .params
        .entries()
        .iter()
        .map(|e| {
            let rec = TensorRecord {
                name: e.name.clone(),
                shape: e.tensor.shape().to_vec(),
                dtype: DTYPE.into(),
                byte_offset: offset,
                slicing_tag: e.slicing_tag().into(),
            };
            offset += 8 * e.tensor.numel() as u64;
            rec
        })
        .collect();
    let space = model.space();
    Manifest {
        config: model.config.clone(),
        grids: Grids {
            widths: space.widths.values.clone(),
            depths: space.depths.values.clone(),
        },
        tensors,
        note: note.into(),
    }
}

pub fn to_bytes(model: &SlimModel, note: &str) -> Result<Vec<u8>> {
    let manifest = serde_json::to_vec(&manifest_of(model, note))?;
    let mut out = Vec::with_capacity(12 + manifest.len() + 8 * model.params.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for e in model.params.entries() {
        for v in e.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn bad(msg: impl Into<String>) -> DstError {
    DstError::Checkpoint(msg.into())
}

/// Parse the header only.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("missing DST1 magic"));
    }
    let len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < len {
        return Err(bad(format!("manifest length {len} exceeds file")));
    }
    let manifest: Manifest = serde_json::from_slice(&body[..len])?;
    Ok((manifest, &body[len..]))
}

pub fn from_bytes(bytes: &[u8]) -> Result<(SlimModel, Manifest)> {
    let (manifest, blob) = read_manifest(bytes)?;
    let mut model = SlimModel::new(manifest.config.clone(), 0)?;
    if manifest.tensors.len() != model.params.len() {
        return Err(bad(format!(
            "{} tensors listed, layout has {}",
            manifest.tensors.len(),
            model.params.len()
        )));
    }
    let mut expected = 0u64;
    for (id, rec) in manifest.tensors.iter().enumerate() {
        let entry = model.params.entry(id);
        if rec.name != entry.name {
            return Err(bad(format!("tensor {id} is '{}', expected '{}'", rec.name, entry.name)));
        }
        if rec.shape != entry.tensor.shape() {
            return Err(bad(format!("'{}' has shape {:?}, expected {:?}", rec.name, rec.shape, entry.tensor.shape())));
        }
        if rec.dtype != DTYPE {
            return Err(bad(format!("'{}' has dtype '{}'", rec.name, rec.dtype)));
        }
        if rec.slicing_tag != entry.slicing_tag() {
            return Err(bad(format!("'{}' is tagged '{}'", rec.name, rec.slicing_tag)));
        }
        if rec.byte_offset != expected {
            return Err(bad(format!("'{}' at offset {}, expected {expected}", rec.name, rec.byte_offset)));
        }
        let n = entry.tensor.numel();
        let start = expected as usize;
        let end = start + 8 * n;
        let chunk = blob.get(start..end).ok_or_else(|| bad(format!("blob truncated in '{}'", rec.name)))?;
        for (dst, src) in model.params.tensor_mut(id).data_mut().iter_mut().zip(chunk.chunks_exact(8)) {
            *dst = f64::from_le_bytes(src.try_into().expect("8 bytes"));
        }
        expected = end as u64;
    }
    if blob.len() as u64 != expected {
        return Err(bad(format!("{} trailing bytes", blob.len() as u64 - expected)));
    }
    Ok((model, manifest))
}

pub fn save(model: &SlimModel, note: &str, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model, note)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(SlimModel, Manifest)> {
    from_bytes(&fs::read(path)?)
}
