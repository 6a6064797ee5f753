//! Named-tensor checkpoint files.
//!
//! Layout: `b"TPPG"`, `u16` version, `u32` header length, a UTF-8 JSON
//! header, then every tensor as contiguous little-endian `f32` values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::Model;
use super::params::ParamSet;
use super::tensor::Tensor;
use super::ModelConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TPPG";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<usize>,
    /// Byte offset relative to the start of the data section.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn encode(model: &Model<f32>, meta: serde_json::Value) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(model.params.len());
    let mut offset = 0u64;
    for e in model.params.entries() {
        tensors.push(TensorEntry {
            name: e.name.clone(),
            dims: e.tensor.shape().to_vec(),
            offset,
        });
        offset += 4 * e.tensor.len() as u64;
    }
    let header = Header {
        config: model.config.clone(),
        tensors,
        meta,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::json("checkpoint header", e))?;
    let mut out = Vec::with_capacity(10 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for e in model.params.entries() {
        for v in e.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a checkpoint into its header and tensors (config not yet enforced).
pub fn decode(bytes: &[u8]) -> Result<(Header, ParamSet<f32>)> {
    let bad = |d: &str| Error::format("checkpoint", d.to_string());
    if bytes.len() < 10 || &bytes[..4] != MAGIC {
        return Err(bad("missing TPPG magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let body = bytes.get(10..10 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| Error::json("checkpoint header", e))?;
    let data = &bytes[10 + hlen..];
    let mut params = ParamSet::new();
    let mut expected_offset = 0u64;
    for t in &header.tensors {
        if t.offset != expected_offset {
            return Err(bad(&format!("tensor {} at offset {}, expected {expected_offset}", t.name, t.offset)));
        }
        let n: usize = t.dims.iter().product();
        let start = t.offset as usize;
        let chunk = data
            .get(start..start + 4 * n)
            .ok_or_else(|| bad(&format!("truncated data for tensor {}", t.name)))?;
        let values = chunk
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if params.id(&t.name).is_some() {
            return Err(bad(&format!("duplicate tensor {}", t.name)));
        }
        params.insert(t.name.clone(), Tensor::new(t.dims.clone(), values)?);
        expected_offset += 4 * n as u64;
    }
    if data.len() as u64 != expected_offset {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok((header, params))
}

pub fn save(path: impl AsRef<Path>, model: &Model<f32>, meta: serde_json::Value) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(model, meta)?).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint using the configuration stored in it.
pub fn load(path: impl AsRef<Path>) -> Result<(Model<f32>, serde_json::Value)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, params) = decode(&bytes)?;
    Ok((Model::from_params(header.config, params)?, header.meta))
}

/// Loads a checkpoint into a model built for `config`; any tensor that
/// disagrees with that configuration is reported by name.
pub fn load_into(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Model<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, params) = decode(&bytes)?;
    Model::from_params(config.clone(), params)
}
