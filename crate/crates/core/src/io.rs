//! File containers shared across modules.
//!
//! Matrix files (posteriors `CTCP`, features `FEAT`) use a 16-byte header:
//!
//! ```text
//! offset  size  field
//! 0       4     magic
//! 4       4     rows (u32, little endian)
//! 8       4     cols (u32, little endian)
//! 12      4     reserved, always zero
//! 16      ...   rows * cols f32 values, little endian, row-major
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const POSTERIORS_MAGIC: [u8; 4] = *b"CTCP";
pub const FEATURES_MAGIC: [u8; 4] = *b"FEAT";
const HEADER_LEN: usize = 16;

pub fn encode_matrix(magic: [u8; 4], m: &Array2<f32>) -> Vec<u8> {
    let (rows, cols) = m.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + rows * cols * 4);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_matrix(magic: [u8; 4], bytes: &[u8]) -> Result<Array2<f32>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format("matrix file shorter than header".into()));
    }
    if bytes[..4] != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..4]),
            String::from_utf8_lossy(&magic)
        )));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (rows, cols) = (u32_at(4), u32_at(8));
    let body = &bytes[HEADER_LEN..];
    if body.len() != rows * cols * 4 {
        return Err(Error::Format(format!(
            "matrix body has {} bytes, header says {}x{}",
            body.len(),
            rows,
            cols
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_matrix(path: &Path, magic: [u8; 4], m: &Array2<f32>) -> Result<()> {
    fs::write(path, encode_matrix(magic, m)).map_err(|e| Error::file(path, e))
}

pub fn read_matrix(path: &Path, magic: [u8; 4]) -> Result<Array2<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_matrix(magic, &bytes)
}

/// Reads a JSON Lines file, skipping blank lines.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::file(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn header_layout() {
        let m = array![[1.0f32, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let bytes = encode_matrix(POSTERIORS_MAGIC, &m);
        assert_eq!(bytes.len(), 16 + 6 * 4);
        assert_eq!(&bytes[..4], b"CTCP");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(decode_matrix(POSTERIORS_MAGIC, &bytes).unwrap(), m);
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        let m = array![[1.0f32]];
        let bytes = encode_matrix(FEATURES_MAGIC, &m);
        assert!(decode_matrix(POSTERIORS_MAGIC, &bytes).is_err());
        assert!(decode_matrix(FEATURES_MAGIC, &bytes[..18]).is_err());
        assert!(decode_matrix(FEATURES_MAGIC, &bytes[..3]).is_err());
    }
}
