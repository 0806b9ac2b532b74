//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `CQVDCKPT`, a `u32` format version, a `u32`
//! header length, a UTF-8 JSON header, then every tensor as little-endian
//! `f32` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::harness::model::Model;

pub const MAGIC: &[u8; 8] = b"CQVDCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    step: usize,
    config: String,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

pub fn to_bytes(model: &Model, step: usize) -> Result<Vec<u8>> {
    let header = Header {
        step,
        config: model.cfg.to_text(),
        tensors: model
            .params
            .iter()
            .map(|(_, name, t)| Entry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * model.params.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, t) in model.params.iter() {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let b = bytes
        .get(at..at + 4)
        .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

/// Rebuilds the model a checkpoint was written from, and its step.
pub fn from_bytes(bytes: &[u8]) -> Result<(Model, usize)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint".into()));
    }
    let version = read_u32(bytes, 8)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = read_u32(bytes, 12)? as usize;
    let json = bytes
        .get(16..16 + len)
        .ok_or_else(|| Error::Format("checkpoint header truncated".into()))?;
    let header: Header = serde_json::from_slice(json)?;
    let cfg = Config::parse(&header.config)?;
    let mut model = Model::new(&cfg)?;
    if header.tensors.len() != model.params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, model expects {}",
            header.tensors.len(),
            model.params.len()
        )));
    }
    let mut at = 16 + len;
    for e in &header.tensors {
        let id = model
            .params
            .by_name(&e.name)
            .ok_or_else(|| Error::Format(format!("unknown tensor {}", e.name)))?;
        if model.params.get(id).shape() != e.shape.as_slice() {
            return Err(Error::Format(format!(
                "tensor {} has shape {:?}, model expects {:?}",
                e.name,
                e.shape,
                model.params.get(id).shape()
            )));
        }
        let n: usize = e.shape.iter().product();
        let raw = bytes
            .get(at..at + 4 * n)
            .ok_or_else(|| Error::Format("checkpoint data truncated".into()))?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        model.params.set_data(id, &data)?;
        at += 4 * n;
    }
    if at != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint data".into()));
    }
    Ok((model, header.step))
}

pub fn save(model: &Model, step: usize, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model, step)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, usize)> {
    from_bytes(&fs::read(path)?)
}
