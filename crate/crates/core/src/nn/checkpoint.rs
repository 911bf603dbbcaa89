//! Single-file model archive.
//!
//! Layout: the 8-byte magic `HSEGCKPT`, a little-endian `u64` header length,
//! the JSON header, then every tensor as little-endian `f32` values in
//! row-major order (the sample-file encoding), concatenated in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::device;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"HSEGCKPT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in values (not bytes) from the start of the data section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub config: serde_json::Value,
    pub iteration: u64,
    pub tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint(
    path: &Path,
    kind: &str,
    config: serde_json::Value,
    iteration: u64,
    tensors: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut data: Vec<u8> = Vec::new();
    let mut offset = 0;
    for (name, t) in tensors {
        let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.dims().to_vec(),
            offset,
        });
        offset += values.len();
        for v in values {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        kind: kind.to_string(),
        config,
        iteration,
        tensors: entries,
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, BTreeMap<String, Tensor>)> {
    let bytes = fs::read(path).map_err(|e| Error::data(path, e.to_string()))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::data(path, "not a checkpoint file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| Error::data(path, "truncated checkpoint header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| Error::data(path, e.to_string()))?;
    let data = &bytes[16 + hlen..];
    let mut tensors = BTreeMap::new();
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset * 4;
        let chunk = data.get(start..start + n * 4).ok_or_else(|| {
            Error::data(path, format!("tensor `{}` runs past end of file", e.name))
        })?;
        let values: Vec<f32> = chunk
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(
            e.name.clone(),
            Tensor::from_vec(values, e.shape.as_slice(), &device())?,
        );
    }
    Ok((header, tensors))
}
