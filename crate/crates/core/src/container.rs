//! Flat little-endian tensor container shared by checkpoints and feature caches.
//!
//! Layout: `b"TMBR"`, `u32` version, `u32` entry count, then per entry a
//! `u32` name length, the UTF-8 name, `u32` rank, `rank` `u32` dims and the
//! `f32` data. Non-float metadata is stored one byte per element.

use std::io::{Read, Write};
use std::path::Path;

use crate::{Result, TimbreError};

pub const MAGIC: &[u8; 4] = b"TMBR";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    entries: Vec<Entry>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn push(&mut self, name: impl Into<String>, dims: &[usize], data: Vec<f32>) -> Result<()> {
        let name = name.into();
        if dims.iter().product::<usize>() != data.len() {
            return Err(TimbreError::Format(format!("{name}: dims {dims:?} do not match {} values", data.len())));
        }
        if self.get(&name).is_some() {
            return Err(TimbreError::Format(format!("duplicate entry {name}")));
        }
        self.entries.push(Entry { name, dims: dims.to_vec(), data });
        Ok(())
    }

    pub fn push_bytes(&mut self, name: impl Into<String>, bytes: &[u8]) -> Result<()> {
        self.push(name, &[bytes.len()], bytes.iter().map(|&b| b as f32).collect())
    }

    pub fn push_u64(&mut self, name: impl Into<String>, v: u64) -> Result<()> {
        self.push_bytes(name, &v.to_le_bytes())
    }

    pub fn push_str(&mut self, name: impl Into<String>, s: &str) -> Result<()> {
        self.push_bytes(name, s.as_bytes())
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Entry> {
        self.get(name).ok_or_else(|| TimbreError::Format(format!("missing entry {name}")))
    }

    pub fn bytes(&self, name: &str) -> Result<Vec<u8>> {
        self.require(name)?
            .data
            .iter()
            .map(|&v| {
                if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                    Ok(v as u8)
                } else {
                    Err(TimbreError::Format(format!("{name} holds {v}, not a byte")))
                }
            })
            .collect()
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        let b: [u8; 8] = self
            .bytes(name)?
            .try_into()
            .map_err(|_| TimbreError::Format(format!("{name} is not an 8-byte integer")))?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn string(&self, name: &str) -> Result<String> {
        String::from_utf8(self.bytes(name)?).map_err(|_| TimbreError::Format(format!("{name} is not UTF-8")))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&u32_of(self.entries.len())?.to_le_bytes());
        for e in &self.entries {
            buf.extend_from_slice(&u32_of(e.name.len())?.to_le_bytes());
            buf.extend_from_slice(e.name.as_bytes());
            buf.extend_from_slice(&u32_of(e.dims.len())?.to_le_bytes());
            for &d in &e.dims {
                buf.extend_from_slice(&u32_of(d)?.to_le_bytes());
            }
            for v in &e.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4, "magic")? != MAGIC {
            return Err(TimbreError::BadMagic);
        }
        let version = cur.u32("version")?;
        if version != VERSION {
            return Err(TimbreError::Version(version));
        }
        let count = cur.u32("entry count")? as usize;
        let mut out = Container::new();
        for i in 0..count {
            let len = cur.u32("name length")? as usize;
            let name = String::from_utf8(cur.take(len, "name")?.to_vec())
                .map_err(|_| TimbreError::Format(format!("entry {i} name is not UTF-8")))?;
            let rank = cur.u32("rank")? as usize;
            let mut dims = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                dims.push(cur.u32("dims")? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| TimbreError::Format(format!("{name}: element count overflows")))?;
            let raw = cur.take(n.saturating_mul(4), &name)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            out.push(name, &dims, data)?;
        }
        if cur.pos != bytes.len() {
            return Err(TimbreError::Format(format!("{} trailing bytes", bytes.len() - cur.pos)));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn u32_of(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| TimbreError::Format(format!("{n} does not fit in u32")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(TimbreError::Truncated(what.to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
