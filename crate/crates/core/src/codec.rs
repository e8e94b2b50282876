//! Little-endian binary encoding shared by the checkpoint, adapter, and task
//! module files. Every file ends with a CRC32 of all preceding bytes.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Precision};

#[derive(Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn str16(&mut self, s: &str) -> Result<()> {
        let len = u16::try_from(s.len()).map_err(|_| Error::contract("string longer than 65535 bytes"))?;
        self.u16(len);
        self.bytes(s.as_bytes());
        Ok(())
    }

    /// Elements as f32 regardless of the matrix's precision.
    pub fn f32s(&mut self, m: &Matrix) {
        for &x in m.as_slice() {
            self.bytes(&(x as f32).to_le_bytes());
        }
    }

    /// Elements at the width implied by `precision`.
    pub fn scalars(&mut self, m: &Matrix, precision: Precision) {
        match precision {
            Precision::P32 => self.f32s(m),
            Precision::P64 => m.as_slice().iter().for_each(|&x| self.f64(x)),
        }
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    /// Appends the CRC32 trailer and returns the finished file.
    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    trailer: Option<u32>,
}

impl<'a> Reader<'a> {
    /// Checks the magic and splits off the CRC trailer. The checksum itself
    /// is verified by [`Reader::finish`] once the structure has parsed, so a
    /// short file reports [`Error::Truncated`] rather than a checksum error.
    pub fn open(buf: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        if buf.len() < 4 {
            return Err(Error::Truncated {
                offset: buf.len(),
                needed: 4 - buf.len(),
            });
        }
        let found: [u8; 4] = buf[..4].try_into().expect("4 bytes");
        if &found != magic {
            return Err(Error::BadMagic {
                expected: *magic,
                found,
            });
        }
        if buf.len() < 8 {
            return Err(Error::Truncated {
                offset: buf.len(),
                needed: 8 - buf.len(),
            });
        }
        let (body, trailer) = buf.split_at(buf.len() - 4);
        Ok(Self {
            buf: body,
            pos: 4,
            trailer: Some(u32::from_le_bytes(trailer.try_into().expect("4 bytes"))),
        })
    }

    /// Reader over a prefix without CRC verification (header peeks).
    pub fn unchecked(buf: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        let mut r = Self {
            buf,
            pos: 0,
            trailer: None,
        };
        let found: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if &found != magic {
            return Err(Error::BadMagic {
                expected: *magic,
                found,
            });
        }
        Ok(r)
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n - self.remaining(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn str16(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Malformed("string is not UTF-8".into()))
    }

    pub fn version(&mut self, supported: u16) -> Result<()> {
        let found = self.u16()?;
        if found != supported {
            return Err(Error::VersionMismatch { found, supported });
        }
        Ok(())
    }

    fn matrix_bytes(rows: usize, cols: usize, scalar: usize) -> Result<usize> {
        rows.checked_mul(cols)
            .and_then(|n| n.checked_mul(scalar))
            .ok_or_else(|| Error::Malformed(format!("matrix of {rows}x{cols} is too large")))
    }

    pub fn f32_matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let raw = self.take(Self::matrix_bytes(rows, cols, 4)?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Ok(Matrix::from_parts(rows, cols, Precision::P32, data))
    }

    pub fn matrix(&mut self, rows: usize, cols: usize, precision: Precision) -> Result<Matrix> {
        match precision {
            Precision::P32 => self.f32_matrix(rows, cols),
            Precision::P64 => {
                let raw = self.take(Self::matrix_bytes(rows, cols, 8)?)?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Ok(Matrix::from_parts(rows, cols, Precision::P64, data))
            }
        }
    }

    /// Requires that every byte was consumed, then verifies the checksum.
    pub fn finish(&self) -> Result<()> {
        if let Some(stored) = self.trailer {
            let computed = crc32fast::hash(self.buf);
            if stored != computed {
                return Err(Error::Checksum { stored, computed });
            }
        }
        if self.remaining() != 0 {
            return Err(Error::Malformed(format!("{} unexpected trailing bytes", self.remaining())));
        }
        Ok(())
    }
}
