//! Shared on-disk framing: a magic line, one line of JSON header, then a raw
//! little-endian `f64` payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn encode<H: Serialize>(magic: &str, header: &H, payload: &[f64]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(payload.len() * 8 + 1024);
    out.extend_from_slice(magic.as_bytes());
    out.push(b'\n');
    let json = serde_json::to_vec(header).map_err(|e| Error::Format(e.to_string()))?;
    out.extend_from_slice(&json);
    out.push(b'\n');
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode<H: DeserializeOwned>(magic: &str, bytes: &[u8]) -> Result<(H, Vec<f64>)> {
    let bad = |m: &str| Error::Format(m.to_string());
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing magic line"))?;
    if &bytes[..nl] != magic.as_bytes() {
        return Err(Error::Format(format!(
            "expected magic {magic:?}, found {:?}",
            String::from_utf8_lossy(&bytes[..nl.min(64)])
        )));
    }
    let rest = &bytes[nl + 1..];
    let nl2 = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line"))?;
    let header: H =
        serde_json::from_slice(&rest[..nl2]).map_err(|e| Error::Format(e.to_string()))?;
    let blob = &rest[nl2 + 1..];
    if !blob.len().is_multiple_of(8) {
        return Err(bad("payload length is not a multiple of 8 bytes"));
    }
    let payload = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, payload))
}

pub fn write_file<H: Serialize>(
    path: &Path,
    magic: &str,
    header: &H,
    payload: &[f64],
) -> Result<()> {
    let bytes = encode(magic, header, payload)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_file<H: DeserializeOwned>(path: &Path, magic: &str) -> Result<(H, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(magic, &bytes)
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
