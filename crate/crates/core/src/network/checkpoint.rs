//! Checkpoint container: magic, little-endian u32 header length, JSON header
//! listing `(name, shape)` of parameters then buffers, then the float32
//! little-endian payload of every tensor in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{NamedTensor, NetworkConfig, NetworkParams};
use super::real::Real;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SUSEPNET";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    dtype: String,
    config: NetworkConfig,
    parameters: Vec<Entry>,
    buffers: Vec<Entry>,
}

fn entries<T>(v: &[NamedTensor<T>]) -> Vec<Entry> {
    v.iter()
        .map(|t| Entry {
            name: t.name.clone(),
            shape: t.shape.clone(),
        })
        .collect()
}

pub fn save_checkpoint<T: Real>(params: &NetworkParams<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = Header {
        version: CHECKPOINT_VERSION,
        dtype: "f32".into(),
        config: params.config.clone(),
        parameters: entries(&params.tensors),
        buffers: entries(&params.buffers),
    };
    let json = serde_json::to_vec(&header).map_err(|source| Error::Json {
        context: "checkpoint header".into(),
        source,
    })?;
    let n: usize = params
        .tensors
        .iter()
        .chain(&params.buffers)
        .map(|t| t.data.len())
        .sum();
    let mut bytes = Vec::with_capacity(12 + json.len() + 4 * n);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    for t in params.tensors.iter().chain(&params.buffers) {
        for v in &t.data {
            bytes.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<NetworkParams<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "not a network checkpoint"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = 12 + hlen;
    if bytes.len() < body {
        return Err(Error::format(12, "truncated checkpoint header"));
    }
    let header: Header =
        serde_json::from_slice(&bytes[12..body]).map_err(|source| Error::Json {
            context: path.display().to_string(),
            source,
        })?;
    if header.version != CHECKPOINT_VERSION || header.dtype != "f32" {
        return Err(Error::format(
            12,
            format!(
                "unsupported checkpoint version {} dtype {}",
                header.version, header.dtype
            ),
        ));
    }
    let mut offset = body;
    let mut read = |list: Vec<Entry>| -> Result<Vec<NamedTensor<T>>> {
        list.into_iter()
            .map(|e| {
                let n: usize = e.shape.iter().product();
                let end = offset + 4 * n;
                if end > bytes.len() {
                    return Err(Error::format(
                        offset as u64,
                        format!("payload of {} truncated", e.name),
                    ));
                }
                let data = bytes[offset..end]
                    .chunks_exact(4)
                    .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                    .collect();
                offset = end;
                Ok(NamedTensor {
                    name: e.name,
                    shape: e.shape,
                    data,
                })
            })
            .collect()
    };
    let tensors = read(header.parameters)?;
    let buffers = read(header.buffers)?;
    if offset != bytes.len() {
        return Err(Error::format(
            offset as u64,
            "trailing bytes after checkpoint payload",
        ));
    }
    NetworkParams::from_tensors(&header.config, tensors, buffers)
}
