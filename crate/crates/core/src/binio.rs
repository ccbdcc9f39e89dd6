//! Little-endian byte helpers shared by the checkpoint formats.

use crate::error::{Error, Result};
use crate::numeric::Matrix;

#[derive(Default)]
pub(crate) struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn count(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("count exceeds u32"));
    }

    pub fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    /// rows, cols, then row-major data.
    pub fn matrix(&mut self, m: &Matrix) {
        self.count(m.rows());
        self.count(m.cols());
        self.f64s(m.data());
    }
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, at: 0 }
    }

    pub fn offset(&self) -> usize {
        self.at
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.at
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.at..end];
                self.at = end;
                Ok(s)
            }
            None => Err(Error::parse(
                self.at as u64,
                format!("truncated while reading {what}"),
            )),
        }
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn count(&mut self, what: &str) -> Result<usize> {
        Ok(self.u32(what)? as usize)
    }

    pub fn f64s_into(&mut self, out: &mut [f64], what: &str) -> Result<()> {
        let b = self.take(out.len() * 8, what)?;
        for (o, chunk) in out.iter_mut().zip(b.chunks_exact(8)) {
            *o = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(())
    }

    pub fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; n];
        self.f64s_into(&mut v, what)?;
        Ok(v)
    }

    pub fn matrix(&mut self, what: &str) -> Result<Matrix> {
        let rows = self.count(what)?;
        let cols = self.count(what)?;
        let data = self.f64s(rows * cols, what)?;
        Matrix::new(rows, cols, data)
    }
}
