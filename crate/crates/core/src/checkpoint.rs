//! Single-file array container used for model checkpoints, detector weights
//! and cached detector targets.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"TSRCKPT\0" | u32 format version | u64 header length | JSON header
//! | raw f32 arrays in header order | SHA-256 of everything before it
//! ```

use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TSRCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    seed: u64,
    config: serde_json::Value,
    #[serde(default)]
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

/// In-memory view of a container file.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub meta: serde_json::Value,
    pub arrays: IndexMap<String, ArrayD<f64>>,
}

impl Container {
    pub fn new(kind: impl Into<String>, seed: u64, config: serde_json::Value) -> Self {
        Container {
            kind: kind.into(),
            seed,
            config,
            meta: serde_json::Value::Null,
            arrays: IndexMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            seed: self.seed,
            config: self.config.clone(),
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(name, a)| ArrayEntry { name: name.clone(), shape: a.shape().to_vec(), dtype: "f32".into() })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(header.len() + 64 + 4 * self.arrays.values().map(|a| a.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for a in self.arrays.values() {
            for v in a.iter() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: &str| Error::CorruptCheckpoint(msg.to_string());
        if bytes.len() < MAGIC.len() + 12 + DIGEST_LEN {
            return Err(corrupt("file is truncated"));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: FORMAT_VERSION });
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize.checked_add(header_len).filter(|&e| e <= body.len()).ok_or_else(|| corrupt("file is truncated"))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..header_end]).map_err(|e| corrupt(&format!("unreadable header: {e}")))?;
        if header.format_version != version {
            return Err(corrupt("header version disagrees with preamble"));
        }
        let expected: usize = header.arrays.iter().map(|a| a.shape.iter().product::<usize>() * 4).sum();
        if body.len() - header_end != expected {
            return Err(corrupt(&format!(
                "payload is {} bytes, header declares {expected}",
                body.len() - header_end
            )));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let mut arrays = IndexMap::new();
        let mut offset = header_end;
        for entry in &header.arrays {
            if entry.dtype != "f32" {
                return Err(corrupt(&format!("unsupported dtype {}", entry.dtype)));
            }
            let n: usize = entry.shape.iter().product();
            let values: Vec<f64> = body[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            offset += 4 * n;
            let array = ArrayD::from_shape_vec(IxDyn(&entry.shape), values).map_err(|e| corrupt(&e.to_string()))?;
            arrays.insert(entry.name.clone(), array);
        }
        Ok(Container { kind: header.kind, seed: header.seed, config: header.config, meta: header.meta, arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let bytes = self.to_bytes()?;
        // Write-then-rename so readers never observe a partial file.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
