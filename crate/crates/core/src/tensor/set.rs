//! `NamedTensorSet` and its binary container format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RTS1" | u32 count | count × ( u16 name_len | name | u8 rank | rank × u32 dim | Π dim × f64 )
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{RaaError, Result};

pub const RTS1_MAGIC: &[u8; 4] = b"RTS1";

/// Insertion-ordered collection of uniquely named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NamedTensorSet {
    entries: Vec<(String, Tensor)>,
}

impl NamedTensorSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(RaaError::State(format!("duplicate tensor name `{name}`")));
        }
        if name.len() > u16::MAX as usize {
            return Err(RaaError::State(format!("tensor name too long ({} bytes)", name.len())));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| RaaError::State(format!("missing tensor `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Merge another set in, prefixing each of its names.
    pub fn extend_prefixed(&mut self, prefix: &str, other: NamedTensorSet) -> Result<()> {
        for (name, t) in other.entries {
            self.insert(format!("{prefix}{name}"), t)?;
        }
        Ok(())
    }

    /// Bitwise equality of names, order, shapes and float bit patterns.
    pub fn bit_eq(&self, other: &NamedTensorSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
    }
}

pub fn write_set<W: Write>(set: &NamedTensorSet, mut w: W) -> Result<()> {
    w.write_all(RTS1_MAGIC)?;
    w.write_all(&(set.len() as u32).to_le_bytes())?;
    for (name, t) in set.iter() {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[t.rank() as u8])?;
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| RaaError::State(format!("dimension {d} exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn save_set(set: &NamedTensorSet, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_set(set, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_set(path: impl AsRef<Path>) -> Result<NamedTensorSet> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_set(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(RaaError::Format {
                offset: self.pos as u64,
                reason: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn read_set(bytes: &[u8]) -> Result<NamedTensorSet> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != RTS1_MAGIC {
        return Err(RaaError::Format {
            offset: 0,
            reason: "bad magic, expected RTS1".into(),
        });
    }
    let count = cur.u32("entry count")?;
    let mut set = NamedTensorSet::new();
    for _ in 0..count {
        let entry_start = cur.pos as u64;
        let name_len = u16::from_le_bytes(cur.take(2, "name length")?.try_into().unwrap());
        let name_off = cur.pos as u64;
        let name = std::str::from_utf8(cur.take(name_len as usize, "name")?)
            .map_err(|_| RaaError::Format {
                offset: name_off,
                reason: "name is not valid UTF-8".into(),
            })?
            .to_owned();
        let rank_off = cur.pos as u64;
        let rank = cur.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("dimension")? as usize);
        }
        if rank == 0 || shape.contains(&0) {
            return Err(RaaError::Format {
                offset: rank_off,
                reason: format!("invalid shape {shape:?} for `{name}`"),
            });
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| RaaError::Format {
                offset: rank_off,
                reason: "shape overflows".into(),
            })?;
        let raw = cur.take(len, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data)?;
        if set.get(&name).is_some() {
            return Err(RaaError::Format {
                offset: entry_start,
                reason: format!("duplicate name `{name}`"),
            });
        }
        set.insert(name, t)?;
    }
    if cur.pos != bytes.len() {
        return Err(RaaError::Format {
            offset: cur.pos as u64,
            reason: "trailing bytes after last entry".into(),
        });
    }
    Ok(set)
}
