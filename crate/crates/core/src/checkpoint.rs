//! Parameter files: raw little-endian f64 values plus a JSON sidecar.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub kind: String,
    pub d_model: usize,
    pub n_tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_id: Option<usize>,
    pub seed: u64,
    pub version: u32,
    pub n_params: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

/// `model.bin` -> `model.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn write(path: &Path, params: &[f64], sidecar: &Sidecar) -> Result<()> {
    if sidecar.n_params != params.len() {
        return Err(Error::dims("checkpoint write", sidecar.n_params, params.len()));
    }
    let mut bytes = Vec::with_capacity(params.len() * 8);
    for p in params {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let mut json = serde_json::to_string_pretty(sidecar)?;
    json.push('\n');
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

pub fn read(path: &Path, kind: &str) -> Result<(Vec<f64>, Sidecar)> {
    let side = sidecar_path(path);
    let json = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar = serde_json::from_str(&json)?;
    let malformed = |reason: String| Error::Malformed {
        what: format!("checkpoint {}", path.display()),
        reason,
    };
    if sidecar.kind != kind {
        return Err(malformed(format!("expected kind {kind:?}, found {:?}", sidecar.kind)));
    }
    if sidecar.version != CHECKPOINT_VERSION {
        return Err(malformed(format!("unsupported version {}", sidecar.version)));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != sidecar.n_params * 8 {
        return Err(malformed(format!("{} bytes for {} parameters", bytes.len(), sidecar.n_params)));
    }
    let params: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    if params.iter().any(|p| !p.is_finite()) {
        return Err(malformed("non-finite parameter".into()));
    }
    Ok((params, sidecar))
}
