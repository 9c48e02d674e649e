//! Named f32 tensors stored as one little-endian blob plus a JSON manifest
//! of shapes and byte ranges.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DataError, Result};
use crate::arch::{ArchSpec, ChannelConfig};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode_tensors(tensors: &[(String, Tensor<f32>)]) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut blob = Vec::with_capacity(tensors.iter().map(|(_, t)| t.numel() * 4).sum());
    let entries = tensors
        .iter()
        .map(|(name, t)| {
            let offset = blob.len();
            t.data().iter().for_each(|v| blob.extend_from_slice(&v.to_le_bytes()));
            TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset }
        })
        .collect();
    (entries, blob)
}

pub fn decode_tensors(entries: &[TensorEntry], blob: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    entries
        .iter()
        .map(|e| {
            let numel: usize = e.shape.iter().product();
            let end = e.offset + numel * 4;
            let bytes = blob.get(e.offset..end).ok_or_else(|| DataError::Format {
                offset: e.offset as u64,
                detail: format!("tensor {} needs bytes {}..{end}, blob has {}", e.name, e.offset, blob.len()),
            })?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::new(e.shape.clone(), data).map_err(|err| DataError::Record(err.to_string()))?;
            Ok((e.name.clone(), t))
        })
        .collect()
}

pub const CHECKPOINT_FORMAT: &str = "scratchprune.checkpoint/v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    arch: ArchSpec,
    config: ChannelConfig,
    tensors: Vec<TensorEntry>,
    blob_sha256: String,
}

fn blob_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("bin")
}

/// Writes `path` (JSON manifest) and `path` with a `.bin` extension (weights
/// and BN statistics).
pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<()> {
    let (tensors, blob) = encode_tensors(&model.named_tensors(true));
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        arch: model.arch().clone(),
        config: model.config().clone(),
        tensors,
        blob_sha256: sha256_hex(&blob),
    };
    let bin = blob_path(path);
    std::fs::write(&bin, &blob).map_err(|e| DataError::io(&bin, e))?;
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(path, text).map_err(|e| DataError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let format = value.get("format").and_then(|f| f.as_str()).unwrap_or_default();
    if format != CHECKPOINT_FORMAT {
        return Err(DataError::Version { found: format.into(), expected: CHECKPOINT_FORMAT.into() });
    }
    let manifest: CheckpointManifest = serde_json::from_value(value)?;
    let bin = blob_path(path);
    let blob = std::fs::read(&bin).map_err(|e| DataError::io(&bin, e))?;
    if sha256_hex(&blob) != manifest.blob_sha256 {
        return Err(DataError::Checksum(bin.display().to_string()));
    }
    let tensors = decode_tensors(&manifest.tensors, &blob)?;
    let mut model = Model::generate(&manifest.arch, &manifest.config, 0)
        .map_err(|e| DataError::Record(e.to_string()))?;
    model.load_named_tensors(&tensors).map_err(|e| DataError::Record(e.to_string()))?;
    Ok(model)
}
