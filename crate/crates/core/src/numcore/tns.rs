//! `TNS1` binary tensor files: the magic bytes `TNS1`, a little-endian
//! `u32` rank, `rank` little-endian `u32` dimensions, then the row-major
//! little-endian `f32` payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TNS1";

pub fn encode(dims: &[usize], values: &[f32]) -> Result<Vec<u8>> {
    let count: usize = dims.iter().product();
    if count != values.len() {
        return Err(Error::Shape {
            context: "TNS1 encode",
            axis: "value count",
            expected: count,
            found: values.len(),
        });
    }
    let mut out = Vec::with_capacity(8 + 4 * dims.len() + 4 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::invalid("TNS1 dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format("TNS1", "truncated header"))
}

/// Returns `(dims, values)`.
pub fn decode(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::format("TNS1", "bad magic"));
    }
    let rank = read_u32(bytes, 4)? as usize;
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        dims.push(read_u32(bytes, 8 + 4 * i)? as usize);
    }
    let start = 8 + 4 * rank;
    let count: usize = dims.iter().product();
    let payload = &bytes[start.min(bytes.len())..];
    if payload.len() != 4 * count {
        return Err(Error::format(
            "TNS1",
            format!("payload holds {} bytes, dims need {}", payload.len(), 4 * count),
        ));
    }
    let values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((dims, values))
}

pub fn write(path: &Path, dims: &[usize], values: &[f32]) -> Result<()> {
    let bytes = encode(dims, values)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format { message, .. } => Error::format(path.display().to_string(), message),
        other => other,
    })
}

/// Reads a file and checks its dimensions.
pub fn read_expect(path: &Path, dims: &[usize]) -> Result<Vec<f32>> {
    let (found, values) = read(path)?;
    if found != dims {
        return Err(Error::format(
            path.display().to_string(),
            format!("expected dims {dims:?}, found {found:?}"),
        ));
    }
    Ok(values)
}
