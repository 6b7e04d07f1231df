//! Stage model persistence.
//!
//! A checkpoint is two files sharing a basename: `<stem>.ckpt` holds the
//! parameter tensors as concatenated tensor records in registration
//! order, and `<stem>.json` holds the topology (stage, architecture,
//! parameter names and shapes) plus a sha256 checksum of the `.ckpt`
//! bytes. Loading rebuilds the model from the sidecar and overwrites the
//! fresh parameters with the stored values; any mismatch between the
//! sidecar, the record stream, and the rebuilt model is an error.
//!
//! Values cross the boundary as f32, like every tensor artifact. Save
//! followed by load is idempotent from the second round trip on.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::tensor::{encode_tensor, read_tensor_record};
use crate::error::{FocusError, Result};

use super::{StageArch, StageKind, StageModel};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

/// Sidecar contents: everything needed to rebuild the model plus the
/// weight checksum.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub stage: StageKind,
    pub n_classes: usize,
    pub feature_dim: usize,
    pub slice_decision_threshold: f64,
    pub arch: StageArch,
    params: Vec<ParamMeta>,
    pub param_checksum: String,
}

pub fn checkpoint_paths(dir: &Path, stage: StageKind) -> (PathBuf, PathBuf) {
    let stem = stage.file_stem();
    (dir.join(format!("{stem}.ckpt")), dir.join(format!("{stem}.json")))
}

/// The exact bytes `save_stage` writes to the `.ckpt` file: every
/// parameter tensor as an f32 record, registration order.
pub fn param_bytes(model: &StageModel) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    for tensor in model.store.iter() {
        let data: Vec<f32> = tensor.values.iter().map(|&v| v as f32).collect();
        bytes.extend_from_slice(&encode_tensor(&tensor.shape, &data)?);
    }
    Ok(bytes)
}

/// Write `<stem>.ckpt` and `<stem>.json` into `dir`, overwriting any
/// previous checkpoint for the same stage.
pub fn save_stage(model: &StageModel, dir: &Path) -> Result<CheckpointMeta> {
    fs::create_dir_all(dir)?;
    let (ckpt_path, meta_path) = checkpoint_paths(dir, model.stage);
    let bytes = param_bytes(model)?;
    let params = model
        .store
        .iter()
        .map(|tensor| ParamMeta { name: tensor.name.clone(), shape: tensor.shape.clone() })
        .collect();
    let meta = CheckpointMeta {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        stage: model.stage,
        n_classes: model.n_classes(),
        feature_dim: model.feature_dim,
        slice_decision_threshold: model.slice_decision_threshold,
        arch: model.arch.clone(),
        params,
        param_checksum: sha256_hex(&bytes),
    };
    fs::write(&ckpt_path, &bytes)?;
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)?;
    Ok(meta)
}

/// Read the sidecar alone, without touching the weights.
pub fn load_meta(dir: &Path, stage: StageKind) -> Result<CheckpointMeta> {
    let (_, meta_path) = checkpoint_paths(dir, stage);
    let text = fs::read_to_string(&meta_path)
        .map_err(|e| FocusError::Checkpoint(format!("{}: {e}", meta_path.display())))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    if meta.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(FocusError::Checkpoint(format!(
            "unsupported checkpoint schema_version {}",
            meta.schema_version
        )));
    }
    if meta.stage != stage {
        return Err(FocusError::Checkpoint(format!(
            "sidecar is for stage {:?}, expected {stage:?}",
            meta.stage
        )));
    }
    Ok(meta)
}

/// Rebuild a stage model from its checkpoint pair.
pub fn load_stage(dir: &Path, stage: StageKind) -> Result<StageModel> {
    let meta = load_meta(dir, stage)?;
    let (ckpt_path, _) = checkpoint_paths(dir, stage);
    let bytes = fs::read(&ckpt_path)
        .map_err(|e| FocusError::Checkpoint(format!("{}: {e}", ckpt_path.display())))?;
    let checksum = sha256_hex(&bytes);
    if checksum != meta.param_checksum {
        return Err(FocusError::Checkpoint(format!(
            "weight checksum mismatch for {}: sidecar says {}, file hashes to {checksum}",
            ckpt_path.display(),
            meta.param_checksum
        )));
    }
    let mut model = StageModel::build(stage, meta.feature_dim, &meta.arch)?;
    model.slice_decision_threshold = meta.slice_decision_threshold;
    if meta.params.len() != model.store.len() {
        return Err(FocusError::Checkpoint(format!(
            "sidecar lists {} params, model has {}",
            meta.params.len(),
            model.store.len()
        )));
    }
    let mut cursor = Cursor::new(&bytes);
    for (i, expected) in meta.params.iter().enumerate() {
        let tensor = model.store.get(i);
        if tensor.name != expected.name || tensor.shape != expected.shape {
            return Err(FocusError::Checkpoint(format!(
                "param {i} mismatch: model has {} {:?}, sidecar lists {} {:?}",
                tensor.name, tensor.shape, expected.name, expected.shape
            )));
        }
        let (shape, data) = read_tensor_record(&mut cursor)
            .map_err(|e| FocusError::Checkpoint(format!("record {i} ({}): {e}", expected.name)))?;
        if shape != expected.shape {
            return Err(FocusError::Checkpoint(format!(
                "record {i} has shape {shape:?}, sidecar lists {:?}",
                expected.shape
            )));
        }
        let values = model.store.values_mut(i);
        for (slot, &v) in values.iter_mut().zip(&data) {
            *slot = v as f64;
        }
    }
    if (cursor.position() as usize) != bytes.len() {
        return Err(FocusError::Checkpoint(format!(
            "{} has {} trailing bytes after the last record",
            ckpt_path.display(),
            bytes.len() - cursor.position() as usize
        )));
    }
    Ok(model)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
