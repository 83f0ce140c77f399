//! Named-tensor container shared by base, adapter and GMM files:
//! 8-byte magic, u16 version, u32 header length, JSON header,
//! little-endian f32 data laid out per the header manifest, then the
//! SHA-256 of everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const VERSION: u16 = 1;
pub const BASE_MAGIC: &[u8; 8] = b"SOUPCKP1";
pub const GMM_MAGIC: &[u8; 8] = b"SOUPGMM1";
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the data section.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub config: serde_json::Value,
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Serializes tensors as f32 regardless of `S`.
pub fn encode<S: Scalar>(
    magic: &[u8; 8],
    kind: &str,
    config: serde_json::Value,
    metadata: serde_json::Value,
    tensors: &[(String, &Tensor<S>)],
) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 4 * t.len() as u64;
    }
    let header = Header {
        kind: kind.to_string(),
        config,
        metadata,
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(format!("header: {e}")))?;
    let mut out = Vec::with_capacity(14 + json.len() + offset as usize + DIGEST_LEN);
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Header and named tensors of a decoded file.
pub type Decoded<S> = (Header, Vec<(String, Tensor<S>)>);

pub fn decode<S: Scalar>(magic: &[u8; 8], bytes: &[u8]) -> Result<Decoded<S>> {
    if bytes.len() < 14 + DIGEST_LEN || &bytes[..8] != magic {
        return Err(Error::Format(format!(
            "bad magic or truncated file, expected {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let (bytes, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(bytes).as_slice() != digest {
        return Err(Error::Format("checksum mismatch: file is truncated or corrupted".into()));
    }
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let data_start = 14usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("truncated header".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[14..data_start]).map_err(|e| Error::Format(format!("header: {e}")))?;
    let data = &bytes[data_start..];
    let mut expected = 0u64;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset != expected {
            return Err(Error::Format(format!("tensor {} at offset {}, expected {expected}", e.name, e.offset)));
        }
        let start = e.offset as usize;
        let end = start + 4 * n;
        if end > data.len() {
            return Err(Error::Format(format!("tensor {} truncated", e.name)));
        }
        let values = data[start..end]
            .chunks_exact(4)
            .map(|c| S::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        let t = Tensor::new(e.shape.clone(), values).map_err(|err| Error::Format(format!("tensor {}: {err}", e.name)))?;
        tensors.push((e.name.clone(), t));
        expected = end as u64;
    }
    if expected as usize != data.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensor data",
            data.len() - expected as usize
        )));
    }
    Ok((header, tensors))
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Removes `name` from a decoded tensor list.
pub(crate) fn take(tensors: &mut Vec<(String, Tensor<f32>)>, name: &str) -> Result<Tensor<f32>> {
    let i = tensors
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
    Ok(tensors.remove(i).1)
}
