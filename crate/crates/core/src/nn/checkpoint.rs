//! Checkpoint files: an 8-byte little-endian header length, a JSON header
//! with the tensor table and metadata, then raw little-endian `f32` payloads.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DepAudioNetParams, ModelDims, Tensor};
use crate::train::EpochLog;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Resolved configuration of the run that produced the checkpoint.
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default)]
    pub epoch: Option<usize>,
    #[serde(default)]
    pub val_loss: Option<f64>,
    #[serde(default)]
    pub loss_curve: Vec<EpochLog>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: DepAudioNetParams<f32>,
    pub meta: CheckpointMeta,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dims: ModelDims,
    tensors: Vec<TensorEntry>,
    meta: CheckpointMeta,
}

/// Serializes a checkpoint to bytes.
pub fn encode_checkpoint(
    params: &DepAudioNetParams<f32>,
    meta: &CheckpointMeta,
) -> Result<Vec<u8>> {
    params.validate()?;
    let mut offset = 0;
    let mut tensors = Vec::new();
    for (name, t) in params.tensors() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape.clone(),
            offset,
        });
        offset += 4 * t.numel();
    }
    let header = serde_json::to_vec(&Header {
        format_version: FORMAT_VERSION,
        dims: params.dims,
        tensors,
        meta: meta.clone(),
    })?;
    let mut out = Vec::with_capacity(8 + header.len() + offset);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in params.tensors() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses checkpoint bytes. Nothing is returned unless every tensor is read.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let corrupt = |msg: String| Error::Checkpoint(format!("corrupted header: {msg}"));
    if bytes.len() < 8 {
        return Err(corrupt("file shorter than the length prefix".into()));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|l| l.checked_add(8))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| {
            corrupt(format!(
                "header length {header_len} exceeds file size {}",
                bytes.len()
            ))
        })?;
    let raw: serde_json::Value =
        serde_json::from_slice(&bytes[8..header_end]).map_err(|e| corrupt(e.to_string()))?;
    let version = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| corrupt("missing format_version".into()))?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(Error::UnsupportedVersion(
            u32::try_from(version).unwrap_or(u32::MAX),
        ));
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| corrupt(e.to_string()))?;
    let payload = &bytes[header_end..];

    let mut expected_offset = 0;
    let mut named = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        if entry.offset != expected_offset {
            return Err(Error::Checkpoint(format!(
                "tensor {} at offset {} but the previous tensor ends at {expected_offset}",
                entry.name, entry.offset
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let end = entry.offset + 4 * numel;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "truncated payload: tensor {} needs bytes {}..{end}, payload has {}",
                entry.name,
                entry.offset,
                payload.len()
            )));
        }
        let data = payload[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        named.push((
            entry.name.clone(),
            Tensor::new(entry.shape.clone(), data, true)?,
        ));
        expected_offset = end;
    }
    if expected_offset != payload.len() {
        return Err(Error::Checkpoint(format!(
            "tensor table covers {expected_offset} bytes but the payload has {}",
            payload.len()
        )));
    }
    let params = DepAudioNetParams::from_named(header.dims, named)?;
    Ok(Checkpoint {
        params,
        meta: header.meta,
    })
}

/// Writes via a temporary sibling file and a rename so readers never see a
/// partial checkpoint.
pub fn save_checkpoint(
    path: &Path,
    params: &DepAudioNetParams<f32>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let bytes = encode_checkpoint(params, meta)?;
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
