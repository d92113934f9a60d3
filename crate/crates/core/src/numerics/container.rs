//! Tensor container files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ARTC" | u32 version | u64 index_len | index (UTF-8 JSON) | sha256(index) | payload
//! ```
//!
//! The index holds free-form metadata, one `{name, offset, length}` record per
//! entry (offsets relative to the payload start) and the payload SHA-256.
//! Each payload entry is `u32 header_len | {name, dtype, shape} JSON | row-major data`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Float, NumericsError, Tensor};

const MAGIC: &[u8; 4] = b"ARTC";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    offset: u64,
    length: u64,
}

#[derive(Serialize, Deserialize)]
struct Index {
    meta: serde_json::Value,
    entries: Vec<IndexEntry>,
    payload_sha256: String,
}

#[derive(Serialize, Deserialize)]
struct EntryHeader {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

/// In-memory contents of a container file.
#[derive(Clone, Debug, PartialEq)]
pub struct Container<T> {
    pub meta: serde_json::Value,
    pub entries: Vec<(String, Tensor<T>)>,
}

impl<T: Float> Container<T> {
    pub fn new(meta: serde_json::Value) -> Self {
        Container { meta, entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.entries.len());
        for (name, t) in &self.entries {
            let start = payload.len();
            let header = EntryHeader { name: name.clone(), dtype: T::DTYPE.to_string(), shape: t.shape().to_vec() };
            let hj = serde_json::to_vec(&header).expect("header serializes");
            payload.extend_from_slice(&(hj.len() as u32).to_le_bytes());
            payload.extend_from_slice(&hj);
            for &v in t.data() {
                v.write_le(&mut payload);
            }
            entries.push(IndexEntry { name: name.clone(), offset: start as u64, length: (payload.len() - start) as u64 });
        }
        let index = Index { meta: self.meta.clone(), entries, payload_sha256: hex::encode(Sha256::digest(&payload)) };
        let ij = serde_json::to_vec(&index).expect("index serializes");
        let mut out = Vec::with_capacity(payload.len() + ij.len() + 48);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(ij.len() as u64).to_le_bytes());
        out.extend_from_slice(&ij);
        out.extend_from_slice(&Sha256::digest(&ij));
        out.extend_from_slice(&payload);
        out
    }

    /// Parses a container; stored `f32`/`f64` data is converted to `T`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NumericsError> {
        let integrity = |m: &str| NumericsError::Integrity(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(integrity("missing magic or truncated header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(NumericsError::Format(format!("unsupported version {version}")));
        }
        let ilen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let istart = 16usize;
        let iend = istart.checked_add(ilen).ok_or_else(|| integrity("index length overflow"))?;
        if bytes.len() < iend + 32 {
            return Err(integrity("truncated index table"));
        }
        let ij = &bytes[istart..iend];
        if Sha256::digest(ij).as_slice() != &bytes[iend..iend + 32] {
            return Err(integrity("index table checksum mismatch"));
        }
        let index: Index = serde_json::from_slice(ij).map_err(|e| NumericsError::Format(e.to_string()))?;
        let payload = &bytes[iend + 32..];
        if hex::encode(Sha256::digest(payload)) != index.payload_sha256 {
            return Err(integrity("payload checksum mismatch (truncated or corrupt)"));
        }
        let mut entries = Vec::with_capacity(index.entries.len());
        for e in &index.entries {
            let (off, len) = (e.offset as usize, e.length as usize);
            if off + len > payload.len() || len < 4 {
                return Err(integrity("entry out of bounds"));
            }
            let chunk = &payload[off..off + len];
            let hlen = u32::from_le_bytes(chunk[..4].try_into().unwrap()) as usize;
            if 4 + hlen > chunk.len() {
                return Err(integrity("entry header out of bounds"));
            }
            let header: EntryHeader =
                serde_json::from_slice(&chunk[4..4 + hlen]).map_err(|e| NumericsError::Format(e.to_string()))?;
            let data = &chunk[4 + hlen..];
            let numel: usize = header.shape.iter().product();
            let values: Vec<T> = match header.dtype.as_str() {
                "f32" => decode::<f32, T>(data, numel)?,
                "f64" => decode::<f64, T>(data, numel)?,
                other => return Err(NumericsError::Format(format!("unknown dtype {other}"))),
            };
            entries.push((header.name, Tensor::new(&header.shape, values)?));
        }
        Ok(Container { meta: index.meta, entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), NumericsError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NumericsError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn decode<S: Float, T: Float>(data: &[u8], numel: usize) -> Result<Vec<T>, NumericsError> {
    if data.len() != numel * S::BYTES {
        return Err(NumericsError::Integrity(format!("expected {} data bytes, found {}", numel * S::BYTES, data.len())));
    }
    Ok(data.chunks_exact(S::BYTES).map(|c| T::of(S::read_le(c).as_f64())).collect())
}
