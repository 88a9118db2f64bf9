//! Checkpoint format: a JSON manifest (`<base>.json`) describing names,
//! shapes, dtype and byte offsets, plus a contiguous little-endian f32
//! payload (`<base>.bin`).
//!
//! Compute runs in f64; the f32 payload cast is the one documented lossy
//! step. Saving an already-loaded store again is byte-identical.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{ParamError, ParameterStore};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest parse error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("manifest entry {name}: {detail}")]
    BadEntry { name: String, detail: String },
    #[error("payload is {got} bytes, manifest requires {expected}")]
    PayloadSize { expected: u64, got: u64 },
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub payload_bytes: u64,
}

fn manifest_path(base: &Path) -> PathBuf {
    base.with_extension("json")
}

fn payload_path(base: &Path) -> PathBuf {
    base.with_extension("bin")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }
}

/// Writes `<base>.json` + `<base>.bin`. Entries follow store name order and
/// tile the payload without gaps.
pub fn save(store: &ParameterStore, base: &Path) -> Result<(), CheckpointError> {
    let mut entries = Vec::with_capacity(store.len());
    let mut payload: Vec<u8> = Vec::new();
    for (name, tensor) in store.iter() {
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            dtype: "f32".to_string(),
            offset: payload.len() as u64,
        });
        for &v in tensor.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = Manifest { entries, payload_bytes: payload.len() as u64 };
    let json = serde_json::to_string_pretty(&manifest)?;
    if let Some(dir) = base.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    let mpath = manifest_path(base);
    fs::write(&mpath, json).map_err(io_err(&mpath))?;
    let ppath = payload_path(base);
    fs::write(&ppath, payload).map_err(io_err(&ppath))?;
    Ok(())
}

/// Reads a checkpoint back into a store (all groups trainable; apply a stage
/// afterwards). Validates that the entries tile the payload exactly.
pub fn load(base: &Path) -> Result<ParameterStore, CheckpointError> {
    let mpath = manifest_path(base);
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(&mpath).map_err(io_err(&mpath))?)?;
    let ppath = payload_path(base);
    let payload = fs::read(&ppath).map_err(io_err(&ppath))?;
    if payload.len() as u64 != manifest.payload_bytes {
        return Err(CheckpointError::PayloadSize {
            expected: manifest.payload_bytes,
            got: payload.len() as u64,
        });
    }

    let mut expected_offset = 0u64;
    let mut store = ParameterStore::new();
    for entry in &manifest.entries {
        if entry.dtype != "f32" {
            return Err(CheckpointError::BadEntry {
                name: entry.name.clone(),
                detail: format!("unsupported dtype {}", entry.dtype),
            });
        }
        if entry.offset != expected_offset {
            return Err(CheckpointError::BadEntry {
                name: entry.name.clone(),
                detail: format!("offset {} leaves a gap at {expected_offset}", entry.offset),
            });
        }
        let numel: usize = entry.shape.iter().product();
        let bytes = numel * 4;
        let start = entry.offset as usize;
        let end = start + bytes;
        if end > payload.len() {
            return Err(CheckpointError::BadEntry {
                name: entry.name.clone(),
                detail: "entry runs past the payload".into(),
            });
        }
        let mut data = Vec::with_capacity(numel);
        for chunk in payload[start..end].chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        store.insert(&entry.name, Tensor::new(entry.shape.clone(), data)?)?;
        expected_offset = end as u64;
    }
    if expected_offset != manifest.payload_bytes {
        return Err(CheckpointError::PayloadSize {
            expected: manifest.payload_bytes,
            got: expected_offset,
        });
    }
    Ok(store)
}
