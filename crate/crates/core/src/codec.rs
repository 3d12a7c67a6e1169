//! Little-endian byte writer/reader shared by the tree and model formats.
//!
//! Every artifact ends with an FNV-1a 64 checksum of all preceding bytes.

use crate::{Error, Result};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

#[derive(Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u16) -> Self {
        let mut w = Writer::default();
        w.buf.extend_from_slice(magic);
        w.u16(version);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
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

    pub fn f64s(&mut self, vs: &[f64]) {
        vs.iter().for_each(|&v| self.f64(v));
    }

    pub fn finish(mut self) -> Vec<u8> {
        let sum = fnv1a64(&self.buf);
        self.u64(sum);
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic, version and checksum; the reader is positioned after the version.
    pub fn open(
        bytes: &'a [u8],
        magic: &[u8; 4],
        version: u16,
        artifact: &'static str,
    ) -> Result<Self> {
        if bytes.len() < 14 {
            return Err(Error::Format {
                offset: bytes.len(),
                msg: format!("truncated {artifact} header"),
            });
        }
        if &bytes[..4] != magic {
            return Err(Error::Format {
                offset: 0,
                msg: format!("bad magic, not a {artifact} file"),
            });
        }
        let found = u16::from_le_bytes([bytes[4], bytes[5]]);
        if found != version {
            return Err(Error::Version {
                artifact,
                found,
                expected: version,
            });
        }
        let body = bytes.len() - 8;
        let stored = u64::from_le_bytes(bytes[body..].try_into().expect("8 bytes"));
        if stored != fnv1a64(&bytes[..body]) {
            return Err(Error::Format {
                offset: body,
                msg: "checksum mismatch".into(),
            });
        }
        Ok(Reader {
            buf: &bytes[..body],
            pos: 6,
        })
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.pos,
            msg: msg.into(),
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.fail(format!("truncated: need {n} more bytes"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn len(&mut self, limit: usize, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = self.u64()?;
        if v > limit as u64 {
            return Err(Error::Format {
                offset: at,
                msg: format!("{what} {v} exceeds limit {limit}"),
            });
        }
        Ok(v as usize)
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn finite(&mut self) -> Result<f64> {
        let at = self.pos;
        let v = self.f64()?;
        if !v.is_finite() {
            return Err(Error::Format {
                offset: at,
                msg: format!("non-finite value {v}"),
            });
        }
        Ok(v)
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if (self.buf.len() - self.pos) / 8 < n {
            return self.fail(format!("truncated: need {n} floats"));
        }
        (0..n).map(|_| self.finite()).collect()
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn end(self) -> Result<()> {
        if self.remaining() != 0 {
            return self.fail(format!("{} trailing bytes", self.remaining()));
        }
        Ok(())
    }
}
