//! Little-endian cursor helpers shared by the binary formats.

use crate::error::{FormatError, GemError, Result};

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            }
            .into());
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let found = self.take(4)?;
        if found != expected {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            }
            .into());
        }
        Ok(())
    }

    pub fn version(&mut self, supported: u32) -> Result<()> {
        let v = self.u32()?;
        if v != supported {
            return Err(FormatError::UnsupportedVersion(v).into());
        }
        Ok(())
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// `n` f32 values widened to f64. The byte count is checked before
    /// allocating, so a corrupt length cannot trigger a huge allocation.
    pub fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n.checked_mul(4).ok_or_else(|| {
            GemError::from(FormatError::Malformed {
                what: "length",
                detail: format!("{n} values overflow"),
            })
        })?;
        let b = self.take(len)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    pub fn finish(self) -> Result<()> {
        let rest = self.bytes.len() - self.pos;
        if rest != 0 {
            return Err(FormatError::TrailingBytes(rest).into());
        }
        Ok(())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f32s<'a>(out: &mut Vec<u8>, values: impl IntoIterator<Item = &'a f64>) {
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}
