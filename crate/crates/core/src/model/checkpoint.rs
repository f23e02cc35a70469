//! `CFIT` checkpoint container.
//!
//! Layout: magic `b"CFIT"`, `u32` format version, `u64` header length,
//! JSON header (config, parameter table, free-form metadata), then the
//! little-endian `f64` payload. Offsets in the table are byte offsets into
//! the payload.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::encoder::DualEncoder;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::{ParamName, ParamStore};

pub const MAGIC: &[u8; 4] = b"CFIT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: ParamName,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub config: ModelConfig,
    pub params: Vec<ParamEntry>,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

/// Decoded checkpoint: the model plus its metadata.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: DualEncoder,
    pub meta: BTreeMap<String, serde_json::Value>,
}

pub fn to_bytes(model: &DualEncoder, meta: &BTreeMap<String, serde_json::Value>) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(model.params().len());
    let mut payload = Vec::with_capacity(model.params().scalar_count() * 8);
    for (_, name, t) in model.params().iter() {
        entries.push(ParamEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        config: model.config().clone(),
        params: entries,
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Checkpoint> {
    let bad = |detail: String| Error::Format {
        path: origin.to_path_buf(),
        detail,
    };
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("missing CFIT magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])?;
    let payload = &bytes[header_end..];

    let mut params = ParamStore::new();
    let mut expected_end = 0usize;
    for entry in header.params {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + n * 8;
        if end > payload.len() {
            return Err(bad(format!("{} runs past the payload", entry.name)));
        }
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        expected_end = expected_end.max(end);
        params.insert(entry.name, Tensor::new(entry.shape, data)?)?;
    }
    if expected_end != payload.len() {
        return Err(bad(format!(
            "payload has {} bytes, table covers {expected_end}",
            payload.len()
        )));
    }
    Ok(Checkpoint {
        model: DualEncoder::from_params(header.config, params)?,
        meta: header.meta,
    })
}

pub fn save(path: &Path, model: &DualEncoder, meta: &BTreeMap<String, serde_json::Value>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, to_bytes(model, meta)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path)?, path)
}
