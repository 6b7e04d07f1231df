//! Portable tensor file format.
//!
//! One UTF-8 JSON header line `{"dtype":"f32","shape":[..]}` terminated by
//! `\n`, followed by the values as 32-bit little-endian IEEE-754 floats in
//! row-major order. The encoding is byte-stable: identical (shape, data)
//! always produce identical bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{FocusError, Result};

/// Serialize one tensor record (header + payload) into a byte buffer.
pub fn encode_tensor(shape: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(FocusError::Format(format!(
            "shape {:?} holds {} values but {} were given",
            shape,
            n,
            data.len()
        )));
    }
    if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
        return Err(FocusError::Format(format!(
            "non-finite value at flat index {bad}"
        )));
    }
    // The header is formatted by hand so the byte layout cannot drift.
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    let header = format!("{{\"dtype\":\"f32\",\"shape\":[{}]}}\n", dims.join(","));
    let mut out = Vec::with_capacity(header.len() + 4 * data.len());
    out.extend_from_slice(header.as_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Write a tensor to `path` in the format above.
pub fn write_tensor(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    let bytes = encode_tensor(shape, data)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

#[derive(serde::Deserialize)]
struct Header {
    dtype: String,
    shape: Vec<usize>,
}

/// Read one tensor record from a stream. Leaves the reader positioned just
/// past the payload, so records can be concatenated in a single file.
pub fn read_tensor_record<R: Read>(r: &mut R) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let got = r.read(&mut byte)?;
        if got == 0 {
            return Err(FocusError::Format(
                "missing newline-terminated tensor header".into(),
            ));
        }
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
        if header_bytes.len() > 4096 {
            return Err(FocusError::Format("tensor header exceeds 4096 bytes".into()));
        }
    }
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| FocusError::Format(format!("malformed tensor header: {e}")))?;
    if header.dtype != "f32" {
        return Err(FocusError::Format(format!(
            "unsupported dtype {:?}",
            header.dtype
        )));
    }
    let n: usize = header.shape.iter().product();
    let mut payload = vec![0u8; 4 * n];
    r.read_exact(&mut payload).map_err(|_| {
        FocusError::Format(format!(
            "truncated payload: shape {:?} requires {} bytes",
            header.shape,
            4 * n
        ))
    })?;
    let mut data = Vec::with_capacity(n);
    for chunk in payload.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(FocusError::Format(format!(
                "non-finite value at flat index {}",
                data.len()
            )));
        }
        data.push(v);
    }
    Ok((header.shape, data))
}

/// Read a whole tensor file. Trailing bytes after the payload are rejected.
pub fn read_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut r = BufReader::new(File::open(path)?);
    let out = read_tensor_record(&mut r)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(FocusError::Format(format!(
            "trailing bytes after payload in {}",
            path.display()
        )));
    }
    Ok(out)
}
