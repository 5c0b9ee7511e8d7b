//! Model checkpoints.
//!
//! Layout (little endian): magic `ACKP`, version `u16`, manifest length
//! `u32`, the manifest as UTF-8 JSON (model configuration plus the tensor
//! directory: name, rows, cols, offset), then every parameter as f64 in
//! directory order.

use std::path::Path;

use camtraj_core::predictor::{Model, ModelConfig, TensorInfo};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::fsutil;

pub const MAGIC: &[u8; 4] = b"ACKP";
pub const VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    tensors: Vec<TensorInfo>,
    parameter_count: usize,
}

pub fn to_bytes(model: &Model) -> CliResult<Vec<u8>> {
    let manifest = Manifest {
        config: model.config.clone(),
        tensors: model.tensors.clone(),
        parameter_count: model.params.len(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| CliError::numerical(format!("checkpoint manifest: {e}")))?;
    let len = u32::try_from(json.len()).map_err(|_| CliError::numerical("checkpoint manifest too large"))?;
    let mut out = Vec::with_capacity(10 + json.len() + 8 * model.params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    for p in &model.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> CliResult<Model> {
    if bytes.len() < 10 {
        return Err(CliError::input("truncated checkpoint header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(CliError::input(format!(
            "bad magic {:?}, expected \"ACKP\"",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(CliError::input(format!("unsupported checkpoint version {version}, expected {VERSION}")));
    }
    let len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let body = &bytes[10..];
    if body.len() < len {
        return Err(CliError::input("truncated checkpoint manifest"));
    }
    let manifest: Manifest =
        serde_json::from_slice(&body[..len]).map_err(|e| CliError::input(format!("checkpoint manifest: {e}")))?;
    let payload = &body[len..];
    if payload.len() != 8 * manifest.parameter_count {
        return Err(CliError::input(format!(
            "checkpoint payload has {} bytes, expected {}",
            payload.len(),
            8 * manifest.parameter_count
        )));
    }
    let params = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let model = Model::from_parts(manifest.config, params)?;
    if model.tensors != manifest.tensors {
        return Err(CliError::input("checkpoint tensor directory does not match its configuration"));
    }
    Ok(model)
}

pub fn write(path: &Path, model: &Model) -> CliResult<()> {
    fsutil::atomic_write(path, &to_bytes(model)?)
}

pub fn read(path: &Path) -> CliResult<Model> {
    from_bytes(&fsutil::read(path)?).map_err(|e| e.at(path))
}
