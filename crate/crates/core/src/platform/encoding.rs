//! Canonical encoding for every signed or hashed structure.
//!
//! A canonical encoding is the concatenation of its fields in declared order,
//! each field written as a 4-byte big-endian length followed by the field
//! bytes. Nested structures are encoded as a single field holding their own
//! canonical bytes, so the encoding is injective by construction.

use thiserror::Error;

use super::Digest;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("truncated field at offset {0}")]
    Truncated(usize),
    #[error("field at offset {offset} has length {len}, expected {expected}")]
    BadLength {
        offset: usize,
        len: usize,
        expected: usize,
    },
    #[error("invalid utf-8 in text field at offset {0}")]
    Utf8(usize),
    #[error("{0} trailing bytes after last field")]
    Trailing(usize),
    #[error("invalid value: {0}")]
    Invalid(String),
}

#[derive(Debug, Default, Clone)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, field: &[u8]) -> &mut Self {
        let len = u32::try_from(field.len()).expect("canonical field exceeds 4 GiB");
        self.buf.extend_from_slice(&len.to_be_bytes());
        self.buf.extend_from_slice(field);
        self
    }

    pub fn str(&mut self, field: &str) -> &mut Self {
        self.bytes(field.as_bytes())
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.bytes(&[v])
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.bytes(&v.to_be_bytes())
    }

    pub fn u128(&mut self, v: u128) -> &mut Self {
        self.bytes(&v.to_be_bytes())
    }

    pub fn digest(&mut self, d: &Digest) -> &mut Self {
        self.bytes(d.as_bytes())
    }

    /// Encodes a list as a count field followed by one field per element.
    pub fn list<T>(&mut self, items: impl ExactSizeIterator<Item = T>, mut each: impl FnMut(&mut Self, T)) -> &mut Self {
        self.u64(items.len() as u64);
        for item in items {
            each(self, item);
        }
        self
    }

    pub fn finish(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.buf)
    }
}

#[derive(Debug, Clone)]
pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], DecodeError> {
        let start = self.pos;
        let header = self
            .buf
            .get(start..start + 4)
            .ok_or(DecodeError::Truncated(start))?;
        let len = u32::from_be_bytes(header.try_into().expect("4-byte slice")) as usize;
        let body = self
            .buf
            .get(start + 4..start + 4 + len)
            .ok_or(DecodeError::Truncated(start))?;
        self.pos = start + 4 + len;
        Ok(body)
    }

    fn fixed<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        let offset = self.pos;
        let b = self.bytes()?;
        b.try_into().map_err(|_| DecodeError::BadLength {
            offset,
            len: b.len(),
            expected: N,
        })
    }

    pub fn str(&mut self) -> Result<&'a str, DecodeError> {
        let offset = self.pos;
        std::str::from_utf8(self.bytes()?).map_err(|_| DecodeError::Utf8(offset))
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.fixed::<1>()?[0])
    }

    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.fixed::<8>()?))
    }

    pub fn u128(&mut self) -> Result<u128, DecodeError> {
        Ok(u128::from_be_bytes(self.fixed::<16>()?))
    }

    pub fn digest(&mut self) -> Result<Digest, DecodeError> {
        Ok(Digest(self.fixed::<32>()?))
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        self.fixed::<N>()
    }

    /// Reads a list count. Bounded by the remaining input so corrupt counts
    /// cannot trigger large allocations.
    pub fn count(&mut self) -> Result<usize, DecodeError> {
        let n = self.u64()?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if n > remaining / 4 {
            return Err(DecodeError::Invalid(format!("list count {n} exceeds input")));
        }
        Ok(n as usize)
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn finish(self) -> Result<(), DecodeError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(DecodeError::Trailing(n)),
        }
    }
}
