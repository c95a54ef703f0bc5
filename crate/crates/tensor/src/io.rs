//! AFAT binary tensor files.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | content                          |
//! |--------------|----------------------------------|
//! | 0..4         | magic `AFAT`                     |
//! | 4..6         | version `u16` = 1                |
//! | 6..8         | rank `u16` (0..=4)               |
//! | 8..8+4·rank  | extents, `u32` each              |
//! | rest         | `f32` payload, row-major         |
//!
//! Values are narrowed to `f32` on save and widened back to `f64` on load.

use std::fs;
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::{Tensor, MAX_RANK};

pub const MAGIC: &[u8; 4] = b"AFAT";
pub const VERSION: u16 = 1;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u16).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn format_err(offset: usize, message: impl Into<String>) -> TensorError {
    TensorError::Format {
        offset,
        message: message.into(),
    }
}

fn read_array<const N: usize>(bytes: &[u8], offset: usize, what: &str) -> Result<[u8; N]> {
    bytes
        .get(offset..offset + N)
        .map(|s| s.try_into().expect("slice length"))
        .ok_or_else(|| format_err(offset, format!("truncated while reading {what}")))
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let magic: [u8; 4] = read_array(bytes, 0, "magic")?;
    if &magic != MAGIC {
        return Err(format_err(0, "bad magic"));
    }
    let version = u16::from_le_bytes(read_array(bytes, 4, "version")?);
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let rank = u16::from_le_bytes(read_array(bytes, 6, "rank")?) as usize;
    if rank > MAX_RANK {
        return Err(format_err(6, format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 8 + 4 * i;
        let d = u32::from_le_bytes(read_array(bytes, off, "extent")?) as usize;
        if d == 0 {
            return Err(format_err(off, "zero extent"));
        }
        shape.push(d);
    }
    let start = 8 + 4 * rank;
    let count: usize = shape.iter().product();
    let expected = start + 4 * count;
    if bytes.len() < expected {
        return Err(format_err(
            bytes.len(),
            format!("truncated payload: expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    if bytes.len() > expected {
        return Err(format_err(expected, "trailing bytes after payload"));
    }
    let data = bytes[start..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk")) as f64)
        .collect();
    Tensor::new(&shape, data)
}

pub fn save_tensor_file(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| TensorError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn load_tensor_file(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| TensorError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    decode(&bytes)
}

/// Rounds every value through `f32`, matching what a save/load cycle keeps.
pub fn round_to_f32(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(&[2, 1], vec![1.0, -2.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"AFAT");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(&b[6..8], &[2, 0]);
        assert_eq!(&b[8..12], &[2, 0, 0, 0]);
        assert_eq!(&b[12..16], &[1, 0, 0, 0]);
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(&b[20..24], &(-2.5f32).to_le_bytes());
        assert_eq!(b.len(), 24);
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let t = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = encode(&t);
        match decode(&b[..b.len() - 2]) {
            Err(TensorError::Format { offset, .. }) => assert_eq!(offset, b.len() - 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut b = encode(&Tensor::scalar(1.0));
        b[0] = b'X';
        assert!(matches!(decode(&b), Err(TensorError::Format { offset: 0, .. })));
        let mut b = encode(&Tensor::scalar(1.0));
        b[4] = 2;
        assert!(matches!(decode(&b), Err(TensorError::Format { offset: 4, .. })));
        assert!(decode(b"AF").is_err());
    }
}
