//! Binary checkpoints: a JSON header (format version, model config,
//! ordered parameter names + shapes + byte offsets, seed, step) followed
//! by a contiguous little-endian f32 payload.
//!
//! Layout: `b"VLCK" | u32 version | u64 header_len | header JSON | payload`.
//! The payload is always f32 regardless of compute precision; there is no
//! checksum, so flipped payload bytes load silently (documented behavior).

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{InitSource, Model, ModelConfig};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"VLCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: Vec<ParamEntry>,
    pub seed: u64,
    pub step: u64,
}

pub fn save<S: Scalar>(model: &Model<S>, path: &Path, seed: u64, step: u64) -> Result<()> {
    let named = model.named_parameters();
    let mut params = Vec::with_capacity(named.len());
    let mut payload: Vec<u8> = Vec::new();
    for (name, tensor) in &named {
        params.push(ParamEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for v in tensor.data().iter() {
            payload.extend_from_slice(&v.to_f32_lossy().to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        params,
        seed,
        step,
    };
    let header_json = serde_json::to_vec(&header)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut file = fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&FORMAT_VERSION.to_le_bytes())?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())?;
    file.write_all(&header_json)?;
    file.write_all(&payload)?;
    Ok(())
}

pub fn read_header_and_payload(path: &Path) -> Result<(CheckpointHeader, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| {
        Error::Checkpoint(format!("cannot read {}: {e}", path.display()))
    })?;
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + header_len])?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "header format version {} disagrees with container {FORMAT_VERSION}",
            header.format_version
        )));
    }
    let payload = bytes[16 + header_len..].to_vec();

    // Offsets must tile the payload exactly: ascending, gap-free,
    // non-overlapping, total length matching.
    let mut expected_offset = 0u64;
    for entry in &header.params {
        if entry.offset != expected_offset {
            return Err(Error::Checkpoint(format!(
                "parameter {} at offset {}, expected {expected_offset} (gap or overlap)",
                entry.name, entry.offset
            )));
        }
        let count: usize = entry.shape.iter().product();
        expected_offset += (count * 4) as u64;
    }
    if payload.len() as u64 != expected_offset {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes, header declares {expected_offset}",
            payload.len()
        )));
    }
    Ok((header, payload))
}

/// Name -> (shape, values) map, for init-from-checkpoint sources.
pub fn read_params(path: &Path) -> Result<HashMap<String, (Vec<usize>, Vec<f32>)>> {
    let (header, payload) = read_header_and_payload(path)?;
    let mut map = HashMap::with_capacity(header.params.len());
    for entry in &header.params {
        let count: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let values: Vec<f32> = (0..count)
            .map(|i| {
                let lo = start + i * 4;
                f32::from_le_bytes(payload[lo..lo + 4].try_into().unwrap())
            })
            .collect();
        map.insert(entry.name.clone(), (entry.shape.clone(), values));
    }
    Ok(map)
}

/// Rebuild a model from a checkpoint; every parameter is filled from the
/// payload and must be present with the exact shape.
pub fn load<S: Scalar>(path: &Path) -> Result<(Model<S>, CheckpointHeader)> {
    let (header, _) = read_header_and_payload(path)?;
    let bag = read_params(path)?;
    let (model, _) = Model::build(&header.config, &InitSource::random())?;
    for (name, param) in model.named_parameters() {
        let (shape, values) = bag
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("parameter {name} missing from checkpoint")))?;
        if shape != param.shape() {
            return Err(Error::ParamShapeMismatch {
                name,
                checkpoint: shape.clone(),
                model: param.shape().to_vec(),
            });
        }
        param.update_data(|d| {
            for (dst, src) in d.iter_mut().zip(values) {
                *dst = S::from_f64_lossy(*src as f64);
            }
        });
    }
    Ok((model, header))
}
