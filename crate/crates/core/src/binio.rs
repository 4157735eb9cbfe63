//! Little-endian helpers shared by the binary file formats, plus the plain
//! dense-matrix file used for node features, stationary features and
//! per-stage predictions.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::dense::Matrix;
use crate::error::{Error, Result};
use crate::real::{DType, Real};

pub const MATRIX_MAGIC: &[u8; 8] = b"PMLPMAT1";
pub const MATRIX_HEADER_LEN: usize = 32;

pub(crate) fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn reals<T: Real>(&mut self, values: &[T]) {
        self.buf.reserve(values.len() * T::DTYPE.size());
        for &v in values {
            v.write_le(&mut self.buf);
        }
    }
    /// Appends the SHA-256 of everything written so far.
    pub fn seal(&mut self) {
        let digest = sha256(&self.buf);
        self.buf.extend_from_slice(&digest);
    }
}

/// Cursor over a byte buffer; running past the end is a format error.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!("truncated: needed {n} bytes at offset {}", self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::format(self.path, format!("size {v} too large")))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    /// Reads `count` values stored as `dtype`, converting to `T`.
    pub fn reals<T: Real>(&mut self, dtype: DType, count: usize) -> Result<Vec<T>> {
        let size = dtype.size();
        let total = count
            .checked_mul(size)
            .ok_or_else(|| Error::format(self.path, "element count overflows"))?;
        let raw = self.take(total)?;
        Ok(match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| T::lit(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
        })
    }
    pub fn position(&self) -> usize {
        self.pos
    }
    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    // Write-then-rename so a crash never leaves a half-written artifact.
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn encode_matrix<T: Real>(m: &Matrix<T>) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MATRIX_MAGIC);
    w.u32(T::DTYPE.code());
    w.u32(0);
    w.u64(m.rows() as u64);
    w.u64(m.cols() as u64);
    w.reals(m.as_slice());
    w.buf
}

pub fn write_matrix<T: Real>(path: &Path, m: &Matrix<T>) -> Result<()> {
    write_file(path, &encode_matrix(m))
}

/// Reads a matrix file of either dtype, converting to `T`.
pub fn read_matrix<T: Real>(path: &Path) -> Result<Matrix<T>> {
    let bytes = read_file(path)?;
    decode_matrix(&bytes, path)
}

pub fn decode_matrix<T: Real>(bytes: &[u8], path: &Path) -> Result<Matrix<T>> {
    let mut r = Reader::new(bytes, path);
    if r.take(8)? != MATRIX_MAGIC {
        return Err(Error::format(path, "not a matrix file (bad magic)"));
    }
    let code = r.u32()?;
    let dtype = DType::from_code(code)
        .ok_or_else(|| Error::format(path, format!("unknown dtype code {code}")))?;
    let _reserved = r.u32()?;
    let rows = r.usize()?;
    let cols = r.usize()?;
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::format(path, "matrix dimensions overflow"))?;
    let expected = count.saturating_mul(dtype.size());
    if r.remaining() != expected {
        return Err(Error::format(
            path,
            format!(
                "payload is {} bytes, header {rows}x{cols} {} implies {expected}",
                r.remaining(),
                dtype.name()
            ),
        ));
    }
    let data = r.reals(dtype, count)?;
    Matrix::from_vec(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_file_round_trip_and_cast() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = Matrix::<f32>::from_fn(3, 2, |i, j| i as f32 * 0.25 - j as f32);
        write_matrix(&path, &m).unwrap();
        assert_eq!(read_matrix::<f32>(&path).unwrap(), m);
        let wide: Matrix<f64> = read_matrix(&path).unwrap();
        assert_eq!(wide, m.cast::<f64>());
    }

    #[test]
    fn truncated_matrix_is_format_error() {
        let m = Matrix::<f64>::identity(3);
        let bytes = encode_matrix(&m);
        let path = Path::new("mem");
        let err = decode_matrix::<f64>(&bytes[..bytes.len() - 3], path).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }
}
