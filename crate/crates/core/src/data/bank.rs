//! Binary embedding bank.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MELTEMB1"            8 bytes
//! count, Q, D           u32 each
//! per entry:
//!   id length           u16
//!   id                  UTF-8 bytes
//!   values              Q·D f32, row-major
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{MeltError, Result};
use crate::math::Matrix;

pub const BANK_MAGIC: &[u8; 8] = b"MELTEMB1";

/// Id-indexed `Q × D` token matrices. Values are held at `f32` precision so
/// that a save/load round-trip is bit-exact.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBank {
    q: usize,
    d: usize,
    entries: BTreeMap<String, Matrix>,
}

impl EmbeddingBank {
    pub fn new(q: usize, d: usize) -> Self {
        Self { q, d, entries: BTreeMap::new() }
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, id: impl Into<String>, tokens: Matrix) -> Result<()> {
        let id = id.into();
        if id.is_empty() {
            return Err(MeltError::data("empty embedding id"));
        }
        if id.len() > u16::MAX as usize {
            return Err(MeltError::data(format!("embedding id longer than {} bytes", u16::MAX)));
        }
        if tokens.shape() != (self.q, self.d) {
            return Err(MeltError::shape(format!(
                "entry {id} is {}x{}, bank is {}x{}",
                tokens.rows(),
                tokens.cols(),
                self.q,
                self.d
            )));
        }
        if !tokens.is_finite() {
            return Err(MeltError::data(format!("entry {id} has nonfinite values")));
        }
        if self.entries.contains_key(&id) {
            return Err(MeltError::data(format!("duplicate embedding id {id}")));
        }
        self.entries.insert(id, tokens.to_f32_precision());
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Matrix> {
        self.entries.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Moves every entry of `other` into `self`.
    pub fn merge(&mut self, other: EmbeddingBank) -> Result<()> {
        if (other.q, other.d) != (self.q, self.d) {
            return Err(MeltError::shape(format!(
                "cannot merge a {}x{} bank into a {}x{} bank",
                other.q, other.d, self.q, self.d
            )));
        }
        for (id, m) in other.entries {
            self.insert(id, m)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.entries.len() * (8 + self.q * self.d * 4));
        out.extend_from_slice(BANK_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.q as u32).to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        for (id, m) in &self.entries {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for v in m.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < BANK_MAGIC.len() || &bytes[..8] != BANK_MAGIC {
            return Err(MeltError::NotABank);
        }
        let mut cur = Cursor { bytes, pos: 8 };
        let count = cur.u32()? as usize;
        let q = cur.u32()? as usize;
        let d = cur.u32()? as usize;
        let mut bank = EmbeddingBank::new(q, d);
        for _ in 0..count {
            let len = cur.u16()? as usize;
            let id = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| MeltError::CorruptBank("id is not UTF-8".into()))?
                .to_string();
            let raw = cur.take(q * d * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let m = Matrix::new(q, d, data)?;
            bank.insert(id, m).map_err(|e| MeltError::CorruptBank(e.to_string()))?;
        }
        if cur.pos != bytes.len() {
            return Err(MeltError::CorruptBank(format!("{} trailing bytes", bytes.len() - cur.pos)));
        }
        Ok(bank)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or_else(|| {
            MeltError::CorruptBank(format!("truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
}
