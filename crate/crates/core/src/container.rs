// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary tensor container shared by checkpoints (`KSCK`) and edit
//! receipts (`KSRC`).
//!
//! Layout: 4 magic bytes, `u32` version (= 1), `u64` header length, a UTF-8
//! JSON header, then every tensor as little-endian `f64` values in row-major
//! order, in manifest order. All integers are little-endian.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{DemError, Result};
use crate::numerics::Matrix;

pub const CONTAINER_VERSION: u32 = 1;

/// One manifest entry of the JSON header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

/// Writes a container. `header` must be a JSON object; the `tensors`
/// manifest key is filled in here.
pub fn write_container<W: Write>(
    mut w: W,
    magic: &[u8; 4],
    header: Value,
    tensors: &[(String, &Matrix)],
) -> Result<()> {
    let mut header = match header {
        Value::Object(map) => map,
        _ => return Err(DemError::Format("container header must be a JSON object".into())),
    };
    let manifest: Vec<TensorEntry> = tensors
        .iter()
        .map(|(name, m)| TensorEntry {
            name: name.clone(),
            shape: [m.rows(), m.cols()],
        })
        .collect();
    header.insert("tensors".into(), serde_json::to_value(manifest)?);
    let header_bytes = serde_json::to_vec(&Value::Object(header))?;

    w.write_all(magic)?;
    w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    let mut buf = Vec::new();
    for (_, m) in tensors {
        buf.clear();
        buf.reserve(m.as_slice().len() * 8);
        for v in m.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

/// Parsed container: the header object (manifest included) and tensors in
/// manifest order.
#[derive(Debug, Clone)]
pub struct Container {
    pub header: serde_json::Map<String, Value>,
    pub tensors: Vec<(String, Matrix)>,
}

pub fn read_container<R: Read>(mut r: R, magic: &[u8; 4]) -> Result<Container> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse_container(&bytes, magic)
}

pub fn parse_container(bytes: &[u8], magic: &[u8; 4]) -> Result<Container> {
    if bytes.len() < 16 {
        return Err(DemError::Format(format!(
            "truncated container: {} bytes, need at least 16",
            bytes.len()
        )));
    }
    if &bytes[0..4] != magic {
        return Err(DemError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[0..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CONTAINER_VERSION {
        return Err(DemError::Format(format!(
            "unsupported version {version}, expected {CONTAINER_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = 16u64
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| {
            DemError::Format(format!(
                "header length {header_len} runs past end of file ({} bytes)",
                bytes.len()
            ))
        })? as usize;
    let header: Value = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| DemError::Format(format!("header is not valid JSON: {e}")))?;
    let Value::Object(header) = header else {
        return Err(DemError::Format("header is not a JSON object".into()));
    };
    let manifest: Vec<TensorEntry> = serde_json::from_value(
        header
            .get("tensors")
            .cloned()
            .ok_or_else(|| DemError::Format("header has no tensor manifest".into()))?,
    )
    .map_err(|e| DemError::Format(format!("bad tensor manifest: {e}")))?;

    let mut expected = 0usize;
    for e in &manifest {
        let n = e.shape[0]
            .checked_mul(e.shape[1])
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| DemError::Format(format!("tensor {} shape overflows", e.name)))?;
        expected = expected
            .checked_add(n)
            .ok_or_else(|| DemError::Format("payload size overflows".into()))?;
    }
    let payload = &bytes[header_end..];
    if payload.len() != expected {
        return Err(DemError::Format(format!(
            "payload is {} bytes but the manifest describes {expected}",
            payload.len()
        )));
    }

    let mut tensors = Vec::with_capacity(manifest.len());
    let mut offset = 0;
    for e in manifest {
        let n = e.shape[0] * e.shape[1];
        let values: Vec<f64> = payload[offset..offset + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset += n * 8;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DemError::Format(format!("tensor {} has non-finite values", e.name)));
        }
        tensors.push((e.name, Matrix::from_vec(e.shape[0], e.shape[1], values)?));
    }
    Ok(Container { header, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Vec<u8> {
        let a = Matrix::from_rows(&[vec![1.0, -2.5], vec![3.25, 1e-300]]).unwrap();
        let b = Matrix::column(&[f64::MIN_POSITIVE, 7.0, -0.0]);
        let mut out = Vec::new();
        write_container(
            &mut out,
            b"TEST",
            json!({"note": "x"}),
            &[("a".into(), &a), ("b".into(), &b)],
        )
        .unwrap();
        out
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let bytes = sample();
        let c = parse_container(&bytes, b"TEST").unwrap();
        assert_eq!(c.header["note"], "x");
        assert_eq!(c.tensors[0].1.get(1, 1).to_bits(), 1e-300f64.to_bits());
        assert_eq!(c.tensors[1].1.get(2, 0).to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn rejects_damaged_files() {
        let bytes = sample();
        assert!(parse_container(&bytes, b"KSCK").is_err());
        assert!(parse_container(&bytes[..10], b"TEST").is_err());
        assert!(parse_container(&bytes[..bytes.len() - 8], b"TEST").is_err());
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(parse_container(&bad_version, b"TEST").is_err());
        let mut extra = bytes;
        extra.extend_from_slice(&[0; 8]);
        assert!(parse_container(&extra, b"TEST").is_err());
    }
}
