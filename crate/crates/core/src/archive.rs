//! Self-describing container of named arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "NARR" | version u32 | entry count u32
//! per entry: name length u32 | name (utf-8) | kind u8 | rank u32 | extents u64 × rank | payload
//! ```
//!
//! Kinds: 0 = `f64` values, 1 = `i64` values, 2 = utf-8 text (rank 1, extent = byte length).
//! Entries are written in name order, so identical contents give identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"NARR";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    Float { shape: Vec<usize>, data: Vec<f64> },
    Int { shape: Vec<usize>, data: Vec<i64> },
    Text(String),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    entries: BTreeMap<String, Entry>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_floats(&mut self, name: &str, shape: &[usize], data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.insert(
            name.to_string(),
            Entry::Float {
                shape: shape.to_vec(),
                data,
            },
        );
    }

    pub fn put_ints(&mut self, name: &str, shape: &[usize], data: Vec<i64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.insert(
            name.to_string(),
            Entry::Int {
                shape: shape.to_vec(),
                data,
            },
        );
    }

    pub fn put_text(&mut self, name: &str, text: impl Into<String>) {
        self.entries.insert(name.to_string(), Entry::Text(text.into()));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    fn missing(name: &str) -> Error {
        Error::Data(format!("archive has no entry '{name}'"))
    }

    pub fn floats(&self, name: &str) -> Result<(&[usize], &[f64])> {
        match self.entries.get(name) {
            Some(Entry::Float { shape, data }) => Ok((shape, data)),
            Some(_) => Err(Error::Data(format!("entry '{name}' is not a float array"))),
            None => Err(Self::missing(name)),
        }
    }

    pub fn ints(&self, name: &str) -> Result<(&[usize], &[i64])> {
        match self.entries.get(name) {
            Some(Entry::Int { shape, data }) => Ok((shape, data)),
            Some(_) => Err(Error::Data(format!("entry '{name}' is not an integer array"))),
            None => Err(Self::missing(name)),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.entries.get(name) {
            Some(Entry::Text(s)) => Ok(s),
            Some(_) => Err(Error::Data(format!("entry '{name}' is not text"))),
            None => Err(Self::missing(name)),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let (kind, shape): (u8, Vec<usize>) = match entry {
                Entry::Float { shape, .. } => (0, shape.clone()),
                Entry::Int { shape, .. } => (1, shape.clone()),
                Entry::Text(s) => (2, vec![s.len()]),
            };
            out.push(kind);
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in &shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            match entry {
                Entry::Float { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Entry::Int { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Entry::Text(s) => out.extend_from_slice(s.as_bytes()),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let count = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| e.to_string())?;
            let kind = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let entry = match kind {
                0 => Entry::Float {
                    data: (0..n).map(|_| r.u64().map(f64::from_bits)).collect::<std::result::Result<_, _>>()?,
                    shape,
                },
                1 => Entry::Int {
                    data: (0..n).map(|_| r.u64().map(|v| v as i64)).collect::<std::result::Result<_, _>>()?,
                    shape,
                },
                2 => Entry::Text(String::from_utf8(r.take(n)?.to_vec()).map_err(|e| e.to_string())?),
                k => return Err(format!("unknown entry kind {k} for '{name}'")),
            };
            entries.insert(name, entry);
        }
        if r.pos != bytes.len() {
            return Err("trailing bytes".into());
        }
        Ok(Archive { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| Error::format(path, e))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
