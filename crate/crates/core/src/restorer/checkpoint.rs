//! Model checkpoints: `model.json` (architecture, tensor table, provenance)
//! next to `model.bin` (little-endian f32 parameters, offsets in values).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::net::{Architecture, ModelParams, TensorSpec};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "resbound-model";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MODEL_JSON: &str = "model.json";
pub const MODEL_BIN: &str = "model.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub architecture: Architecture,
    pub dtype: String,
    pub param_count: usize,
    pub tensors: Vec<TensorSpec>,
    pub blob: String,
    pub blob_sha256: String,
    /// Cases the model has seen; evaluation refuses corpora that overlap.
    pub train_case_ids: Vec<String>,
    pub train_config: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub train_case_ids: Vec<String>,
    pub train_config: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn untrained(params: ModelParams<f32>) -> Self {
        Checkpoint {
            params,
            train_case_ids: Vec::new(),
            train_config: None,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn blob_bytes(p: &ModelParams<f32>) -> Vec<u8> {
    p.flat().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Accepts the checkpoint directory or its `model.json`.
pub fn header_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MODEL_JSON)
    } else {
        path.to_path_buf()
    }
}

/// Writes `model.json` and `model.bin` into `dir`, returning both paths.
pub fn save_checkpoint(ck: &Checkpoint, dir: &Path) -> Result<[PathBuf; 2]> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let blob = blob_bytes(&ck.params);
    let arch = ck.params.arch().clone();
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        tensors: arch.layout(),
        param_count: ck.params.param_count(),
        architecture: arch,
        dtype: "f32-le".into(),
        blob: MODEL_BIN.into(),
        blob_sha256: sha256_hex(&blob),
        train_case_ids: ck.train_case_ids.clone(),
        train_config: ck.train_config.clone(),
    };
    let json_path = dir.join(MODEL_JSON);
    let bin_path = dir.join(MODEL_BIN);
    fs::write(&bin_path, &blob).map_err(|e| Error::io(&bin_path, e))?;
    let mut text = serde_json::to_string_pretty(&header)?;
    text.push('\n');
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok([json_path, bin_path])
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let json_path = header_path(path);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let bad = |message: String| Error::Header { path: json_path.clone(), message };
    let header: CheckpointHeader = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION || header.dtype != "f32-le" {
        return Err(bad(format!(
            "unsupported checkpoint {} v{} ({})",
            header.format, header.version, header.dtype
        )));
    }
    header.architecture.validate()?;
    let layout = header.architecture.layout();
    if header.tensors != layout || header.param_count != header.architecture.param_count() {
        return Err(bad("tensor table does not match the architecture".into()));
    }
    let bin_path = json_path.parent().unwrap_or(Path::new(".")).join(&header.blob);
    let blob = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    if blob.len() != 4 * header.param_count {
        return Err(Error::SizeMismatch { path: bin_path, expected: header.param_count, actual: blob.len() });
    }
    if sha256_hex(&blob) != header.blob_sha256 {
        return Err(bad("parameter blob digest mismatch".into()));
    }
    let data: Vec<f32> = blob.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(Checkpoint {
        params: ModelParams::from_flat(header.architecture, data)?,
        train_case_ids: header.train_case_ids,
        train_config: header.train_config,
    })
}
