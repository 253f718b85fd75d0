//! Versioned container for named f32 tensors plus JSON metadata.
//!
//! Layout: 8-byte magic, u32 format version, u64 header length, JSON header,
//! raw little-endian f32 payload, then a SHA-256 digest of everything before
//! it. Any truncation or corruption fails the digest check.

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"GRADCLT\0";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// Decoded file contents.
#[derive(Debug, Clone)]
pub struct TensorFile {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl TensorFile {
    pub fn tensor(&self, name: &str, device: &Device) -> Result<Tensor> {
        let (_, shape, data) = self
            .tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("tensor '{name}' missing from file")))?;
        Ok(Tensor::from_vec(data.clone(), shape.as_slice(), device)?)
    }
}

pub fn encode(kind: &str, meta: &impl Serialize, tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let header = Header {
        kind: kind.to_string(),
        meta: serde_json::to_value(meta)?,
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.dims().to_vec(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for (_, t) in tensors {
        let values: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

pub fn decode(bytes: &[u8]) -> Result<TensorFile> {
    let corrupt = |what: &str| Error::Checkpoint(format!("integrity check failed: {what}"));
    if bytes.len() < MAGIC.len() + 12 + DIGEST_LEN || &bytes[..8] != MAGIC {
        return Err(corrupt("not a gradcl tensor file or truncated"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("digest mismatch (file truncated or modified)"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (this build reads {FORMAT_VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| corrupt("header length out of range"))?;
    let header: Header = serde_json::from_slice(&body[20..header_end])?;
    let mut offset = header_end;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let end = offset + 4 * n;
        if end > body.len() {
            return Err(corrupt("payload shorter than header declares"));
        }
        let data = body[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push((entry.name, entry.shape, data));
        offset = end;
    }
    if offset != body.len() {
        return Err(corrupt("trailing bytes after payload"));
    }
    Ok(TensorFile {
        kind: header.kind,
        meta: header.meta,
        tensors,
    })
}

pub fn write(path: &Path, kind: &str, meta: &impl Serialize, tensors: &[(String, Tensor)]) -> Result<()> {
    let bytes = encode(kind, meta, tensors)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<TensorFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::load(path, e.to_string()))?;
    decode(&bytes)
}
