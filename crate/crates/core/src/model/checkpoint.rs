//! Checkpoint files.
//!
//! Layout: the magic bytes `FSNW`, a little-endian `u32` header length, a
//! UTF-8 JSON header, then raw little-endian tensor payloads in directory
//! order. Directory offsets are relative to the first payload byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const MAGIC: &[u8; 4] = b"FSNW";
pub const FORMAT_VERSION: u32 = 1;

/// Input geometry the weights were trained for, recorded so prediction can
/// validate new records.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Padded input length `L` used during training.
    #[serde(default)]
    pub input_len: Option<usize>,
    #[serde(default)]
    pub sampling_rate_hz: Option<f64>,
    /// Whether records were halved in rate before padding.
    #[serde(default)]
    pub downsample_by2: bool,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    tensors: BTreeMap<String, TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<CheckpointMeta>,
}

/// Everything a checkpoint file holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S = f64> {
    pub config: ModelConfig,
    pub params: ModelParams<S>,
    pub meta: Option<CheckpointMeta>,
}

impl<S: Float> Checkpoint<S> {
    /// Errors unless the stored parameters fit `cfg` exactly.
    pub fn ensure_compatible(&self, cfg: &ModelConfig) -> Result<()> {
        self.params.check_against(cfg)
    }
}

pub fn save_checkpoint<S: Float>(
    params: &ModelParams<S>,
    cfg: &ModelConfig,
    path: &Path,
) -> Result<()> {
    save_checkpoint_with_meta(params, cfg, None, path)
}

pub fn save_checkpoint_with_meta<S: Float>(
    params: &ModelParams<S>,
    cfg: &ModelConfig,
    meta: Option<&CheckpointMeta>,
    path: &Path,
) -> Result<()> {
    params.check_against(cfg)?;
    let mut tensors = BTreeMap::new();
    let mut payload = Vec::new();
    for (name, t) in params.iter() {
        let offset = payload.len();
        for &v in t.data() {
            v.write_le(&mut payload);
        }
        tensors.insert(
            name.to_string(),
            TensorEntry {
                dtype: S::DTYPE.to_string(),
                shape: t.shape().to_vec(),
                offset,
                length: payload.len() - offset,
            },
        );
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: cfg.clone(),
        tensors,
        meta: meta.cloned(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut bytes = Vec::with_capacity(8 + json.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint, converting stored tensors to precision `S`.
///
/// The file is fully validated before anything is returned: magic, version,
/// directory bounds, payload length, and that the parameter set matches the
/// stored configuration.
pub fn load_checkpoint<S: Float>(path: &Path) -> Result<Checkpoint<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 8 {
        return Err(bad("file too short for a checkpoint header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad(format!("bad magic {:?}, expected FSNW", &bytes[..4])));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let payload_start = 8usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[8..payload_start])
        .map_err(|e| bad(format!("unreadable header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    header.config.validate()?;
    let payload = &bytes[payload_start..];
    let mut expected_end = 0;
    let mut tensors = BTreeMap::new();
    for (name, entry) in &header.tensors {
        let width = match entry.dtype.as_str() {
            "f64" => 8,
            "f32" => 4,
            other => return Err(bad(format!("tensor {name} has unknown dtype {other}"))),
        };
        let numel: usize = entry.shape.iter().product();
        if entry.length != numel * width || entry.offset != expected_end {
            return Err(bad(format!(
                "tensor {name} directory entry is inconsistent"
            )));
        }
        let end = entry.offset + entry.length;
        if end > payload.len() {
            return Err(bad(format!("payload truncated inside tensor {name}")));
        }
        let raw = &payload[entry.offset..end];
        let data: Vec<S> = if width == 8 {
            raw.chunks_exact(8)
                .map(|c| S::from_f64(f64::read_le(c)))
                .collect()
        } else {
            raw.chunks_exact(4)
                .map(|c| S::from_f64(f32::read_le(c) as f64))
                .collect()
        };
        tensors.insert(name.clone(), Tensor::new(entry.shape.clone(), data)?);
        expected_end = end;
    }
    if expected_end != payload.len() {
        return Err(bad(format!(
            "{} trailing payload bytes after the last tensor",
            payload.len() - expected_end
        )));
    }
    let params = ModelParams::from_map(tensors);
    params.check_against(&header.config)?;
    Ok(Checkpoint {
        config: header.config,
        params,
        meta: header.meta,
    })
}
