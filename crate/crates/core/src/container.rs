//! Shared binary container: `magic`, a little-endian `u32` header length,
//! a UTF-8 JSON header, then raw little-endian `f64` payload.

use std::io::{Read, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn write<W: Write, H: Serialize>(
    mut w: W,
    magic: &[u8],
    header: &H,
    payload: impl IntoIterator<Item = f64>,
) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    let len = u32::try_from(json.len())
        .map_err(|_| Error::Format("header exceeds 4 GiB".into()))?;
    w.write_all(magic)?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&json)?;
    let mut chunk = Vec::with_capacity(8 * 4096);
    for v in payload {
        chunk.extend_from_slice(&v.to_le_bytes());
        if chunk.len() >= 8 * 4096 {
            w.write_all(&chunk)?;
            chunk.clear();
        }
    }
    w.write_all(&chunk)?;
    w.flush()?;
    Ok(())
}

/// Parses the header and returns it with the decoded payload.
pub fn read<R: Read, H: DeserializeOwned>(mut r: R, magic: &[u8]) -> Result<(H, Vec<f64>)> {
    let mut found = vec![0u8; magic.len()];
    r.read_exact(&mut found)
        .map_err(|_| Error::Format("file too short for magic".into()))?;
    if found != magic {
        return Err(Error::Format(format!(
            "bad magic: expected {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&found)
        )));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)
        .map_err(|_| Error::Format("missing header length".into()))?;
    let len = u32::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)
        .map_err(|_| Error::Format("truncated header".into()))?;
    let header: H = serde_json::from_slice(&json)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if rest.len() % 8 != 0 {
        return Err(Error::Format(format!(
            "payload of {} bytes is not a whole number of f64 values",
            rest.len()
        )));
    }
    let payload = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((header, payload))
}
