//! Little-endian binary layouts shared by the module codecs and the message
//! envelope.
//!
//! Matrices are written as `rows: u64, cols: u64` followed by `rows * cols`
//! `f64` values in row-major order.

use std::io::{Cursor, Read};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Upper bound on any single dimension read from the wire.
pub const MAX_DIM: u64 = 1 << 32;

#[derive(Debug, Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.buf.write_u16::<LittleEndian>(v).expect("vec write");
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.write_u32::<LittleEndian>(v).expect("vec write");
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.write_u64::<LittleEndian>(v).expect("vec write");
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.write_f64::<LittleEndian>(v).expect("vec write");
        self
    }

    pub fn f64s<'a>(&mut self, vals: impl IntoIterator<Item = &'a f64>) -> &mut Self {
        for v in vals {
            self.f64(*v);
        }
        self
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(b);
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes())
    }

    /// Row-major matrix with its `(rows, cols)` header.
    pub fn matrix(&mut self, m: &DMatrix<f64>) -> &mut Self {
        self.u64(m.nrows() as u64).u64(m.ncols() as u64);
        self.matrix_body_row_major(m)
    }

    pub fn matrix_body_row_major(&mut self, m: &DMatrix<f64>) -> &mut Self {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                self.f64(m[(i, j)]);
            }
        }
        self
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
}

fn eof(e: std::io::Error) -> Error {
    Error::Wire(format!("truncated input: {e}"))
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { cur: Cursor::new(bytes) }
    }

    pub fn u8(&mut self) -> Result<u8> {
        self.cur.read_u8().map_err(eof)
    }

    pub fn u16(&mut self) -> Result<u16> {
        self.cur.read_u16::<LittleEndian>().map_err(eof)
    }

    pub fn u32(&mut self) -> Result<u32> {
        self.cur.read_u32::<LittleEndian>().map_err(eof)
    }

    pub fn u64(&mut self) -> Result<u64> {
        self.cur.read_u64::<LittleEndian>().map_err(eof)
    }

    /// A `u64` dimension, rejected when implausibly large.
    pub fn dim(&mut self) -> Result<usize> {
        let v = self.u64()?;
        if v > MAX_DIM {
            return Err(Error::Wire(format!("dimension {v} exceeds limit")));
        }
        Ok(v as usize)
    }

    pub fn f64(&mut self) -> Result<f64> {
        self.cur.read_f64::<LittleEndian>().map_err(eof)
    }

    pub fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        if self.remaining() < n.saturating_mul(8) {
            return Err(Error::Wire(format!("expected {n} floats, {} bytes left", self.remaining())));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn vector(&mut self, n: usize) -> Result<DVector<f64>> {
        Ok(DVector::from_vec(self.f64_vec(n)?))
    }

    pub fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        if self.remaining() < n {
            return Err(Error::Wire(format!("expected {n} bytes, {} left", self.remaining())));
        }
        let mut out = vec![0u8; n];
        self.cur.read_exact(&mut out).map_err(eof)?;
        Ok(out)
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.bytes(n)?).map_err(|e| Error::Wire(e.to_string()))
    }

    pub fn matrix(&mut self) -> Result<DMatrix<f64>> {
        let rows = self.dim()?;
        let cols = self.dim()?;
        self.matrix_body_row_major(rows, cols)
    }

    pub fn matrix_body_row_major(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let vals = self.f64_vec(rows.checked_mul(cols).ok_or_else(|| Error::Wire("overflow".into()))?)?;
        Ok(DMatrix::from_row_slice(rows, cols, &vals))
    }

    pub fn remaining(&self) -> usize {
        self.cur.get_ref().len() - self.cur.position() as usize
    }

    /// Errors unless every byte was consumed.
    pub fn finish(self) -> Result<()> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(Error::Wire(format!("{n} trailing bytes"))),
        }
    }
}

/// Serializes a weight matrix as `q: u64, F: u64` plus row-major entries.
pub fn encode_matrix(m: &DMatrix<f64>) -> Vec<u8> {
    let mut w = Writer::new();
    w.matrix(m);
    w.finish()
}

pub fn decode_matrix(bytes: &[u8]) -> Result<DMatrix<f64>> {
    let mut r = Reader::new(bytes);
    let m = r.matrix()?;
    r.finish()?;
    Ok(m)
}
