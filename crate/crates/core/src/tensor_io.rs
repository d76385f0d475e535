//! Shape-prefixed little-endian `f32` tensor encoding shared by corpus data
//! files, checkpoints and generated-sample files.
//!
//! A tensor is `u32 ndim`, then `ndim` `u32` dimensions, then the row-major
//! `f32` values. All integers and floats are little-endian.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Magic bytes of a standalone tensor-list file.
pub const TENSOR_FILE_MAGIC: [u8; 4] = *b"XMTF";
pub const TENSOR_FILE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl RawTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn encoded_len(&self) -> usize {
        4 + 4 * self.shape.len() + 4 * self.data.len()
    }
}

pub fn write_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_tensor(w: &mut impl Write, shape: &[usize], data: &[f32]) -> io::Result<()> {
    write_u32(w, shape.len() as u32)?;
    for &d in shape {
        write_u32(w, d as u32)?;
    }
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

/// Reads one tensor; refuses absurd shapes instead of allocating them.
pub fn read_tensor(r: &mut impl Read) -> io::Result<RawTensor> {
    let ndim = read_u32(r)? as usize;
    if ndim > 8 {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("tensor rank {ndim} too large")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u32(r)? as usize);
    }
    let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).filter(|&n| n <= 1 << 30);
    let n = n.ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "tensor too large"))?;
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(RawTensor { shape, data })
}

/// Writes a tensor-list file: magic, version, count, tensors.
pub fn save_tensor_file(path: &Path, tensors: &[RawTensor]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&TENSOR_FILE_MAGIC);
    write_u32(&mut buf, TENSOR_FILE_VERSION).expect("vec write");
    write_u32(&mut buf, tensors.len() as u32).expect("vec write");
    for t in tensors {
        write_tensor(&mut buf, &t.shape, &t.data).expect("vec write");
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_tensor_file(path: &Path) -> Result<Vec<RawTensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::corrupt(path, "truncated header"))?;
    if magic != TENSOR_FILE_MAGIC {
        return Err(Error::corrupt(path, "not a tensor file"));
    }
    let version = read_u32(&mut r).map_err(|_| Error::corrupt(path, "truncated header"))?;
    if version != TENSOR_FILE_VERSION {
        return Err(Error::Version { path: path.into(), found: version, expected: TENSOR_FILE_VERSION });
    }
    let count = read_u32(&mut r).map_err(|_| Error::corrupt(path, "truncated header"))?;
    let tensors = (0..count)
        .map(|i| read_tensor(&mut r).map_err(|e| Error::corrupt(path, format!("tensor {i}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    if !r.is_empty() {
        return Err(Error::corrupt(path, "trailing bytes"));
    }
    Ok(tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_encoding_is_little_endian_and_shape_prefixed() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &[2], &[1.0, -2.0]).unwrap();
        assert_eq!(&buf[..8], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&buf[8..12], &1.0f32.to_le_bytes());
        let t = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(t, RawTensor::new(vec![2], vec![1.0, -2.0]));
    }

    #[test]
    fn truncated_tensor_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        save_tensor_file(&p, &[RawTensor::new(vec![3], vec![1.0, 2.0, 3.0])]).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(load_tensor_file(&p), Err(Error::Corrupt { .. })));
    }
}
