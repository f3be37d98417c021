//! On-disk containers: a JSON sidecar header next to a raw little-endian
//! `float32` payload.
//!
//! Arrays (volumes, FNC matrices, saliency maps) use [`ArrayHeader`];
//! model checkpoints use [`CheckpointHeader`], which adds a parameter
//! descriptor and a SHA-256 digest of the payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::{ParamSpec, Params};

pub const ARRAY_FORMAT: &str = "multivit-array";
pub const CHECKPOINT_FORMAT: &str = "multivit-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayHeader {
    pub format: String,
    pub version: u32,
    pub dims: Vec<usize>,
    pub dtype: String,
    pub endianness: String,
    #[serde(default)]
    pub spacing: Vec<f64>,
    /// Payload file name, relative to the header's directory.
    pub payload: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub descriptor: serde_json::Value,
    pub params: Vec<ParamSpec>,
    pub dtype: String,
    pub endianness: String,
    pub payload: String,
    pub sha256: String,
    #[serde(default)]
    pub config_hash: Option<String>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub fn encode_f32(data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn payload_name(header: &Path, ext: &str) -> String {
    let stem = header.file_stem().and_then(|s| s.to_str()).unwrap_or("payload");
    format!("{stem}.{ext}")
}

fn sibling(header: &Path, name: &str) -> PathBuf {
    header.parent().map(|p| p.join(name)).unwrap_or_else(|| PathBuf::from(name))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let bytes = read_file(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Writes `data` with the given dims; `header_path` should end in `.json`.
pub fn write_array(header_path: &Path, dims: &[usize], spacing: &[f64], data: &[f32]) -> Result<()> {
    let n: usize = dims.iter().product();
    if n != data.len() {
        return Err(Error::Shape(format!("dims {dims:?} need {n} values, got {}", data.len())));
    }
    let payload = payload_name(header_path, "raw");
    let header = ArrayHeader {
        format: ARRAY_FORMAT.into(),
        version: 1,
        dims: dims.to_vec(),
        dtype: "float32".into(),
        endianness: "little".into(),
        spacing: spacing.to_vec(),
        payload: payload.clone(),
    };
    write_file(&sibling(header_path, &payload), &encode_f32(data))?;
    write_json(header_path, &header)
}

/// Reads an array, checking the payload length against the header.
pub fn read_array(header_path: &Path) -> Result<(ArrayHeader, Vec<f32>)> {
    let header: ArrayHeader = read_json(header_path)?;
    if header.format != ARRAY_FORMAT {
        return Err(Error::Invalid(format!("{}: not a {ARRAY_FORMAT} header", header_path.display())));
    }
    if header.dtype != "float32" || header.endianness != "little" {
        return Err(Error::Invalid(format!(
            "{}: unsupported element type {} ({})",
            header_path.display(),
            header.dtype,
            header.endianness
        )));
    }
    let payload_path = sibling(header_path, &header.payload);
    let bytes = read_file(&payload_path)?;
    let expected = header.dims.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(Error::Truncated { path: payload_path, expected, found: bytes.len() });
    }
    Ok((header, decode_f32(&bytes)))
}

/// Saves a parameter collection; returns the payload digest.
pub fn save_checkpoint(
    header_path: &Path,
    kind: &str,
    descriptor: serde_json::Value,
    params: &Params<f32>,
    config_hash: Option<String>,
    metadata: serde_json::Value,
) -> Result<String> {
    let bytes = encode_f32(&params.flatten());
    let digest = sha256_hex(&bytes);
    let payload = payload_name(header_path, "bin");
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        kind: kind.into(),
        descriptor,
        params: params.specs(),
        dtype: "float32".into(),
        endianness: "little".into(),
        payload: payload.clone(),
        sha256: digest.clone(),
        config_hash,
        metadata,
    };
    write_file(&sibling(header_path, &payload), &bytes)?;
    write_json(header_path, &header)?;
    Ok(digest)
}

/// Loads a checkpoint and verifies its digest.
pub fn load_checkpoint(header_path: &Path) -> Result<(CheckpointHeader, Params<f32>)> {
    let header: CheckpointHeader = read_json(header_path)?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Invalid(format!("{}: not a checkpoint", header_path.display())));
    }
    let payload_path = sibling(header_path, &header.payload);
    let bytes = read_file(&payload_path)?;
    if sha256_hex(&bytes) != header.sha256 {
        return Err(Error::Checksum(payload_path));
    }
    if bytes.len() % 4 != 0 {
        return Err(Error::Truncated { path: payload_path, expected: bytes.len() / 4 * 4 + 4, found: bytes.len() });
    }
    let params = Params::from_flat(&header.params, &decode_f32(&bytes))?;
    Ok((header, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn checkpoint_detects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt.json");
        let mut p = Params::<f32>::new();
        p.insert("w", Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        save_checkpoint(&path, "test", serde_json::json!({}), &p, None, serde_json::Value::Null).unwrap();
        let (_, q) = load_checkpoint(&path).unwrap();
        assert_eq!(p, q);

        let bin = dir.path().join("m.ckpt.bin");
        let mut bytes = fs::read(&bin).unwrap();
        bytes[0] ^= 1;
        fs::write(&bin, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checksum(_))));
    }

    #[test]
    fn array_header_names_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.json");
        write_array(&path, &[2, 1], &[], &[1.0, 2.0]).unwrap();
        let (h, d) = read_array(&path).unwrap();
        assert_eq!(h.payload, "vol.raw");
        assert_eq!(d, vec![1.0, 2.0]);
    }
}
