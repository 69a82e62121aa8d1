//! Little-endian primitives shared by the checkpoint and dataset formats.

use std::io::{self, Read, Write};

use crate::numkernel::Tensor;

fn invalid(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}

pub(crate) fn write_string<W: Write + ?Sized>(w: &mut W, s: &str) -> io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

/// u32 rank, rank × u64 dims, row-major f64 values.
pub(crate) fn write_tensor<W: Write + ?Sized>(w: &mut W, t: &Tensor) -> io::Result<()> {
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) struct ByteReader<'a, R: Read> {
    inner: &'a mut R,
}

impl<'a, R: Read> ByteReader<'a, R> {
    pub fn new(inner: &'a mut R) -> Self {
        ByteReader { inner }
    }

    pub fn bytes(&mut self, n: usize) -> io::Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf)?;
        Ok(buf)
    }

    pub fn u32(&mut self) -> io::Result<u32> {
        let mut b = [0u8; 4];
        self.inner.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn u64(&mut self) -> io::Result<u64> {
        let mut b = [0u8; 8];
        self.inner.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn f64s(&mut self, n: usize) -> io::Result<Vec<f64>> {
        let raw = self.bytes(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    pub fn string(&mut self, max: usize) -> io::Result<String> {
        let n = self.u32()? as usize;
        if n > max {
            return Err(invalid("string length out of range"));
        }
        String::from_utf8(self.bytes(n)?).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }

    pub fn tensor_parts(&mut self) -> io::Result<(Vec<usize>, Vec<f64>)> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(invalid("tensor rank out of range"));
        }
        let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<io::Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= 1 << 32)
            .ok_or_else(|| invalid("tensor size out of range"))?;
        Ok((shape, self.f64s(n)?))
    }

    pub fn at_end(&mut self) -> io::Result<bool> {
        let mut rest = [0u8; 1];
        Ok(self.inner.read(&mut rest)? == 0)
    }
}
