// SPDX-License-Identifier: MIT OR Apache-2.0

//! On-disk container shared by activation dumps and lens checkpoints.
//!
//! ```text
//! <magic>\n
//! {"format_version":1, "payload_bytes":N, "payload_sha256":"…", …}\n
//! <N bytes of little-endian f32 payload>
//! ```
//!
//! The header is a single line of JSON so it stays greppable and diff-able.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{LensError, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub(crate) fn push_f32s(out: &mut Vec<u8>, xs: impl IntoIterator<Item = f32>) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Cursor over a payload of little-endian `f32`s.
pub(crate) struct F32Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> F32Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Option<Vec<f32>> {
        let end = self.pos.checked_add(n.checked_mul(4)?)?;
        let chunk = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(
            chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        )
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub(crate) fn write<H: Serialize>(path: &Path, magic: &str, version: u32, header: &H, payload: &[u8]) -> Result<()> {
    let mut obj = Map::new();
    obj.insert("format_version".into(), Value::from(version));
    obj.insert("payload_bytes".into(), Value::from(payload.len() as u64));
    obj.insert("payload_sha256".into(), Value::from(sha256_hex(payload)));
    match serde_json::to_value(header)? {
        Value::Object(fields) => obj.extend(fields),
        other => {
            obj.insert("body".into(), other);
        }
    }
    let mut buf = Vec::with_capacity(payload.len() + 4096);
    buf.extend_from_slice(magic.as_bytes());
    buf.push(b'\n');
    serde_json::to_writer(&mut buf, &Value::Object(obj))?;
    buf.push(b'\n');
    buf.extend_from_slice(payload);

    let mut file = fs::File::create(path).map_err(|e| LensError::io(path, e))?;
    file.write_all(&buf).map_err(|e| LensError::io(path, e))?;
    file.flush().map_err(|e| LensError::io(path, e))
}

/// Reads a container, returning its typed header and verified payload.
///
/// Check order: magic and header syntax, then version, then payload length,
/// then checksum, then header schema.
pub(crate) fn read<H: DeserializeOwned>(path: &Path, magic: &str, version: u32) -> Result<(H, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| LensError::io(path, e))?;
    let header_err = |detail: String| LensError::Header {
        path: path.to_owned(),
        detail,
    };

    let magic_line = format!("{magic}\n");
    let rest = bytes
        .strip_prefix(magic_line.as_bytes())
        .ok_or_else(|| header_err(format!("missing magic line {magic:?}")))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| header_err("header line is not terminated".into()))?;
    let header: Value =
        serde_json::from_slice(&rest[..nl]).map_err(|e| header_err(format!("header is not valid JSON: {e}")))?;
    let payload = &rest[nl + 1..];

    let found = header
        .get("format_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| header_err("missing format_version".into()))?;
    if found != u64::from(version) {
        return Err(LensError::VersionMismatch {
            path: path.to_owned(),
            found: u32::try_from(found).unwrap_or(u32::MAX),
            supported: version,
        });
    }
    let declared = header
        .get("payload_bytes")
        .and_then(Value::as_u64)
        .ok_or_else(|| header_err("missing payload_bytes".into()))?;
    let actual = payload.len() as u64;
    if actual < declared {
        return Err(LensError::Truncated {
            path: path.to_owned(),
            expected: declared,
            actual,
        });
    }
    if actual > declared {
        return Err(LensError::Corrupt {
            path: path.to_owned(),
            detail: format!("{} trailing bytes after payload", actual - declared),
        });
    }
    let want = header
        .get("payload_sha256")
        .and_then(Value::as_str)
        .ok_or_else(|| header_err("missing payload_sha256".into()))?;
    let got = sha256_hex(payload);
    if got != want {
        return Err(LensError::Corrupt {
            path: path.to_owned(),
            detail: format!("payload checksum {got} does not match header {want}"),
        });
    }
    let typed = serde_json::from_value(header).map_err(|e| header_err(format!("header schema: {e}")))?;
    Ok((typed, payload.to_vec()))
}
