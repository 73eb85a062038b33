//! Shared binary framing for the on-disk formats.
//!
//! Framed files are `magic (4 bytes) | header length (u32 LE) | JSON header |
//! little-endian f32 payload`. Checkpoints use a JSON manifest plus a sidecar
//! payload file instead, but share the float codec.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Rounds a value to the nearest f32. Parameters and stored embeddings are kept
/// on the f32 grid so that files round-trip without loss.
#[inline]
pub fn to_f32_grid(x: f64) -> f64 {
    x as f32 as f64
}

pub fn round_slice_to_f32(xs: &mut [f64]) {
    for x in xs {
        *x = to_f32_grid(*x);
    }
}

pub fn encode_f32(values: impl IntoIterator<Item = f64>, out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn decode_f32(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_framed<H: Serialize>(
    path: &Path,
    magic: &[u8; 4],
    header: &H,
    payload: impl IntoIterator<Item = f64>,
) -> Result<()> {
    let header = serde_json::to_vec(header)?;
    let mut bytes = Vec::with_capacity(8 + header.len());
    bytes.extend_from_slice(magic);
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header);
    encode_f32(payload, &mut bytes);
    atomic_write(path, &bytes)
}

/// Reads a framed file. `expected_floats` is derived from the header and the
/// payload must match it exactly.
pub fn read_framed<H: DeserializeOwned>(
    path: &Path,
    magic: &[u8; 4],
    expected_floats: impl FnOnce(&H) -> Result<usize>,
) -> Result<(H, Vec<f64>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 {
        return Err(Error::corrupt(path, "file shorter than frame header"));
    }
    if &bytes[..4] != magic {
        return Err(Error::corrupt(path, "bad magic"));
    }
    let header_len = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    let body = &bytes[8..];
    if body.len() < header_len {
        return Err(Error::corrupt(path, "truncated header"));
    }
    let header: H = serde_json::from_slice(&body[..header_len])
        .map_err(|e| Error::corrupt(path, format!("header: {e}")))?;
    let payload = &body[header_len..];
    let n = expected_floats(&header)?;
    if payload.len() != n * 4 {
        return Err(Error::corrupt(
            path,
            format!("payload is {} bytes, expected {}", payload.len(), n * 4),
        ));
    }
    Ok((header, decode_f32(payload)))
}

/// Hex SHA-256 of a serializable value's JSON encoding.
pub fn json_digest<T: Serialize>(value: &T) -> String {
    use sha2::{Digest, Sha256};
    let bytes = serde_json::to_vec(value).expect("serializable value");
    hex::encode(Sha256::digest(&bytes))
}

/// File-name-safe rendering of an identifier.
pub(crate) fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}
