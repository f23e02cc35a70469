//! On-disk layout: `manifest.json` (spec, per-split example index with byte
//! offsets, blob digest) next to `data.bin` (little-endian `f64` pixels and
//! `u16` token ids).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DatasetSpec, Example, SplitKind, SyntheticDataset};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_FILE: &str = "data.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    id: u64,
    label: usize,
    image_offset: u64,
    caption_offset: u64,
    caption_len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    spec: DatasetSpec,
    blob_sha256: String,
    splits: Vec<(SplitKind, Vec<Entry>)>,
}

pub fn save(dir: &Path, data: &SyntheticDataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut splits = Vec::new();
    for kind in SplitKind::ALL {
        let mut entries = Vec::new();
        for e in data.split(kind) {
            let image_offset = blob.len() as u64;
            for v in e.image.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            let caption_offset = blob.len() as u64;
            for &t in &e.caption {
                blob.extend_from_slice(&(t as u16).to_le_bytes());
            }
            entries.push(Entry {
                id: e.id,
                label: e.label,
                image_offset,
                caption_offset,
                caption_len: e.caption.len(),
            });
        }
        splits.push((kind, entries));
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        spec: data.spec.clone(),
        blob_sha256: hex_digest(&blob),
        splits,
    };
    std::fs::write(dir.join(DATA_FILE), &blob)?;
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<SyntheticDataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let blob_path = dir.join(DATA_FILE);
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(&manifest_path)?)?;
    let bad = |detail: String| Error::Format {
        path: blob_path.clone(),
        detail,
    };
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format {
            path: manifest_path,
            detail: format!("unsupported version {}", manifest.format_version),
        });
    }
    manifest.spec.validate()?;
    let blob = std::fs::read(&blob_path)?;
    if hex_digest(&blob) != manifest.blob_sha256 {
        return Err(bad("digest mismatch".into()));
    }
    let spec = manifest.spec;
    let pixels = spec.channels * spec.image_size * spec.image_size;
    let mut data = SyntheticDataset {
        spec: spec.clone(),
        pretrain: Vec::new(),
        train: Vec::new(),
        base_test: Vec::new(),
        new_test: Vec::new(),
    };
    for (kind, entries) in manifest.splits {
        let mut out = Vec::with_capacity(entries.len());
        for e in entries {
            let start = e.image_offset as usize;
            let bytes = blob
                .get(start..start + pixels * 8)
                .ok_or_else(|| bad(format!("image of example {} out of range", e.id)))?;
            let pixels_data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let start = e.caption_offset as usize;
            let bytes = blob
                .get(start..start + e.caption_len * 2)
                .ok_or_else(|| bad(format!("caption of example {} out of range", e.id)))?;
            let caption = bytes
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes(c.try_into().expect("2 bytes")) as usize)
                .collect();
            out.push(Example {
                id: e.id,
                image: Tensor::new(vec![spec.channels, spec.image_size, spec.image_size], pixels_data)?,
                caption,
                label: e.label,
            });
        }
        match kind {
            SplitKind::Pretrain => data.pretrain = out,
            SplitKind::Train => data.train = out,
            SplitKind::BaseTest => data.base_test = out,
            SplitKind::NewTest => data.new_test = out,
        }
    }
    Ok(data)
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
