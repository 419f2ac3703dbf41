//! Checkpoint format: "MSC1" magic, little-endian u32 header length, a JSON
//! header (format version, caller metadata, tensor directory, step), the
//! tensor payload as little-endian f32 in declaration order, and a trailing
//! SHA-256 of every preceding byte. Loads verify magic, version, shape
//! bookkeeping, and the digest, so silent corruption cannot masquerade as
//! a model.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

use super::ParamStore;

const MAGIC: [u8; 4] = *b"MSC1";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    step: u64,
    meta: serde_json::Value,
    tensors: Vec<TensorInfo>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

/// Serialize the store with caller metadata (spec, seeds, anything JSON).
/// Tensors are written in declaration order as f32; Adam moments are not
/// persisted.
pub fn save(path: &Path, meta: &serde_json::Value, store: &ParamStore) -> Result<()> {
    let header = Header {
        version: VERSION,
        step: store.step(),
        meta: meta.clone(),
        tensors: (0..store.len())
            .map(|i| TensorInfo {
                name: store.name(i).to_string(),
                rows: store.tensor(i).rows(),
                cols: store.tensor(i).cols(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(
        4 + 4 + header_bytes.len() + 4 * store.total_scalars() + 32,
    );
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_bytes);
    for i in 0..store.len() {
        for &v in store.tensor(i).data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);
    fs::write(path, bytes)?;
    Ok(())
}

/// Read a checkpoint back: (metadata, store). The store carries the saved
/// tensors (f32-quantized) with fresh moment buffers and the saved step.
pub fn load(path: &Path) -> Result<(serde_json::Value, ParamStore)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 + 4 + 32 {
        return Err(Error::Corrupt {
            detail: format!("checkpoint too short: {} bytes", bytes.len()),
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let want = Sha256::digest(body);
    if digest != want.as_slice() {
        return Err(Error::CheckpointMismatch {
            detail: "content digest does not match".into(),
        });
    }
    if body[..4] != MAGIC {
        let mut found = [0u8; 4];
        found.copy_from_slice(&body[..4]);
        return Err(Error::BadMagic { found });
    }
    let header_len = u32::from_le_bytes(body[4..8].try_into().unwrap()) as usize;
    if body.len() < 8 + header_len {
        return Err(Error::Corrupt {
            detail: "header extends past end of file".into(),
        });
    }
    let header: Header = serde_json::from_slice(&body[8..8 + header_len])?;
    if header.version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: header.version,
        });
    }
    let mut offset = 8 + header_len;
    let mut store = ParamStore::new();
    for info in &header.tensors {
        let count = info.rows * info.cols;
        let need = count * 4;
        if body.len() < offset + need {
            return Err(Error::Corrupt {
                detail: format!("tensor {} truncated", info.name),
            });
        }
        let mut data = Vec::with_capacity(count);
        for chunk in body[offset..offset + need].chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        offset += need;
        store.add(&info.name, Matrix::from_vec(info.rows, info.cols, data)?)?;
    }
    if offset != body.len() {
        return Err(Error::Corrupt {
            detail: format!("{} trailing bytes after tensors", body.len() - offset),
        });
    }
    store.step = header.step;
    Ok((header.meta, store))
}
