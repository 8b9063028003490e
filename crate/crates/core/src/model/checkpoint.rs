//! Single-file checkpoints.
//!
//! Layout: an 8-byte little-endian header length, the UTF-8 JSON header
//! (config plus a tensor directory with byte offsets into the data section),
//! then every tensor's raw little-endian f32 values back to back.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::EncoderConfig;
use super::encoder::{param_shapes, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FORMAT: &str = "arena-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: EncoderConfig,
    tensors: Vec<Entry>,
}

pub fn to_bytes(params: &ModelParams) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(params.tensors.len());
    let mut offset = 0;
    for (name, t) in &params.tensors {
        entries.push(Entry { name: name.clone(), shape: t.shape().to_vec(), offset, len: t.numel() });
        offset += t.bytes();
    }
    let header = serde_json::to_vec(&Header {
        format: FORMAT.into(),
        version: VERSION,
        config: params.config.clone(),
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(8 + header.len() + offset);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in params.tensors.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let fmt = |m: String| Error::Format(format!("checkpoint: {m}"));
    if bytes.len() < 8 {
        return Err(fmt("shorter than the length prefix".into()));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let data_start = 8usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| fmt(format!("header length {hlen} exceeds file")))?;
    let header: Header = serde_json::from_slice(&bytes[8..data_start])?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(fmt(format!("unsupported format {} v{}", header.format, header.version)));
    }
    let data = &bytes[data_start..];
    let expected = param_shapes(&header.config)?;
    let mut tensors = BTreeMap::new();
    let mut consumed = 0;
    for e in header.tensors {
        if expected.get(&e.name) != Some(&e.shape) {
            return Err(fmt(format!("tensor {} has shape {:?}, config implies {:?}", e.name, e.shape, expected.get(&e.name))));
        }
        let end = e.offset + e.len * 4;
        if e.len != e.shape.iter().product::<usize>() || end > data.len() {
            return Err(fmt(format!("tensor {} out of bounds", e.name)));
        }
        let vals = data[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.insert(e.name, Tensor::new(&e.shape, vals)?);
        consumed += e.len * 4;
    }
    if tensors.len() != expected.len() {
        return Err(fmt(format!("{} tensors present, config implies {}", tensors.len(), expected.len())));
    }
    if consumed != data.len() {
        return Err(fmt(format!("{} trailing data bytes", data.len() - consumed)));
    }
    Ok(ModelParams { config: header.config, tensors })
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(params)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
