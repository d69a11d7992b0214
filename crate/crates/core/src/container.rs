//! Flat binary container shared by checkpoints and the scene tokenizer:
//! `u32 LE header length ‖ UTF-8 JSON header ‖ payload`. The header carries
//! `payload_len` and the SHA-256 `digest` of the payload.

use std::fs;
use std::path::Path;

use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn f32_bytes(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn read_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Serializes `header` (an object) with `digest` and `payload_len` inserted.
pub fn encode(mut header: Value, payload: &[u8]) -> Result<Vec<u8>> {
    let obj = header
        .as_object_mut()
        .ok_or_else(|| Error::Precondition("container header must be a JSON object".into()))?;
    obj.insert("digest".into(), Value::String(sha256_hex(payload)));
    obj.insert("payload_len".into(), Value::from(payload.len() as u64));
    let head = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(4 + head.len() + payload.len());
    out.extend_from_slice(&(head.len() as u32).to_le_bytes());
    out.extend_from_slice(&head);
    out.extend_from_slice(payload);
    Ok(out)
}

pub fn decode<'a>(bytes: &'a [u8], path: &Path) -> Result<(Value, &'a [u8])> {
    let bad = |detail: &str| Error::DigestMismatch {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    if bytes.len() < 4 {
        return Err(bad("file shorter than the header length prefix"));
    }
    let hlen = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    let head = bytes
        .get(4..4 + hlen)
        .ok_or_else(|| bad("truncated header"))?;
    let header: Value = serde_json::from_slice(head).map_err(|_| bad("unreadable header"))?;
    let payload = &bytes[4 + hlen..];
    let want_len = header["payload_len"].as_u64().ok_or_else(|| bad("missing payload_len"))?;
    if payload.len() as u64 != want_len {
        return Err(bad(&format!(
            "payload is {} bytes, header says {want_len}",
            payload.len()
        )));
    }
    let digest = header["digest"].as_str().ok_or_else(|| bad("missing digest"))?;
    if digest != sha256_hex(payload) {
        return Err(bad("payload digest differs from header"));
    }
    Ok((header, payload))
}

pub fn write(path: &Path, header: Value, payload: &[u8]) -> Result<String> {
    let bytes = encode(header, payload)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(payload))
}

pub fn read(path: &Path) -> Result<(Value, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (h, p) = decode(&bytes, path)?;
    Ok((h, p.to_vec()))
}
