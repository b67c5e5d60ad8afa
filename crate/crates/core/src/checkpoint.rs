//! Checkpoint byte format.
//!
//! ```text
//! "PATK" | version: u32 LE | manifest length: u64 LE | JSON manifest | payload
//! ```
//!
//! The payload is every tensor as little-endian f32, in parameter order. The
//! manifest maps tensor names to dtype, shape, byte range, frozen flag and a
//! CRC32 of the byte range, and carries the model configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{ModelConfig, PatrackModel};
use crate::tensor::{DType, Tensor};

pub const MAGIC: &[u8; 4] = b"PATK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
    pub frozen: bool,
    /// CRC32 of the payload slice, 8 lowercase hex digits.
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub model: ModelConfig,
    pub tensors: BTreeMap<String, TensorEntry>,
}

pub fn digest(bytes: &[u8]) -> String {
    format!("{:08x}", crc32fast::hash(bytes))
}

/// Serializes the model; `frozen` mirrors `!requires_grad`.
pub fn encode_checkpoint(model: &PatrackModel<f32>) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = BTreeMap::new();
    for (_, p) in model.store.iter() {
        let start = payload.len();
        for v in p.value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.insert(
            p.name.clone(),
            TensorEntry {
                dtype: DType::Float32,
                shape: p.value.shape().to_vec(),
                offset: start as u64,
                length: (payload.len() - start) as u64,
                frozen: !p.requires_grad,
                digest: digest(&payload[start..]),
            },
        );
    }
    let manifest = serde_json::to_vec(&Manifest {
        model: model.config.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(16 + manifest.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses and verifies a checkpoint into its manifest and named tensors.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Manifest, BTreeMap<String, Tensor<f32>>)> {
    let bad = |m: String| Error::Integrity(m);
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("missing PATK header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let mend = 16usize
        .checked_add(mlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad(format!("manifest length {mlen} exceeds file")))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..mend]).map_err(|e| bad(format!("manifest: {e}")))?;
    let payload = &bytes[mend..];
    let total: u64 = manifest.tensors.values().map(|t| t.length).sum();
    if total != payload.len() as u64 {
        return Err(bad(format!("payload is {} bytes, manifest declares {total}", payload.len())));
    }
    let mut out = BTreeMap::new();
    for (name, e) in &manifest.tensors {
        let (lo, hi) = (e.offset as usize, (e.offset + e.length) as usize);
        if hi > payload.len() || e.dtype != DType::Float32 {
            return Err(bad(format!("tensor {name} has an invalid byte range or dtype")));
        }
        let slice = &payload[lo..hi];
        if digest(slice) != e.digest {
            return Err(bad(format!("digest mismatch on tensor {name}")));
        }
        let data: Vec<f32> = slice
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(&e.shape, data).map_err(|_| bad(format!("tensor {name} shape disagrees with length")))?;
        out.insert(name.clone(), t);
    }
    Ok((manifest, out))
}

/// Rebuilds the model described by the manifest and fills in every tensor.
pub fn model_from_bytes(bytes: &[u8]) -> Result<PatrackModel<f32>> {
    let (manifest, tensors) = decode_checkpoint(bytes)?;
    let mut model = PatrackModel::<f32>::new(&manifest.model, 0)?;
    if model.store.len() != tensors.len() {
        return Err(Error::Integrity(format!(
            "checkpoint holds {} tensors, its model needs {}",
            tensors.len(),
            model.store.len()
        )));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.get(id).name.clone();
        let t = tensors
            .get(&name)
            .ok_or_else(|| Error::Integrity(format!("checkpoint lacks tensor {name}")))?;
        model.store.assign(id, t.clone())?;
        model.store.set_requires_grad(id, !manifest.tensors[&name].frozen);
    }
    Ok(model)
}

pub fn save_checkpoint(model: &PatrackModel<f32>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<PatrackModel<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}
