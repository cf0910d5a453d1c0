//! Self-describing binary container for parameter-shaped data.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "FGLBCNT1"
//! version  u32
//! meta     u32 length + UTF-8 JSON (config, labels, counts)
//! sections u32 count, then per section:
//!   name     u16 length + UTF-8
//!   entries  u32 count, then per entry:
//!     tag    u16 length + UTF-8 (canonical ParamTag string)
//!     ndim   u8, dims u32 each
//!     data   numel × f64 bit patterns
//! ```
//!
//! Entries are written in sorted tag order, so identical content always
//! serializes to identical bytes on every platform.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FGLBCNT1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct Container {
    pub meta: serde_json::Value,
    pub sections: BTreeMap<String, BTreeMap<String, Entry>>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Container {
            meta,
            sections: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, section: &str, tag: String, shape: Vec<usize>, data: Vec<f64>) {
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(tag, Entry { shape, data });
    }

    pub fn section(&self, name: &str) -> Result<&BTreeMap<String, Entry>> {
        self.sections
            .get(name)
            .ok_or_else(|| Error::Format(format!("container has no '{name}' section")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("json meta serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, entries) in &self.sections {
            write_str16(&mut out, name);
            out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
            for (tag, e) in entries {
                write_str16(&mut out, tag);
                out.push(e.shape.len() as u8);
                for &d in &e.shape {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for &v in &e.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::Format("bad magic; not a forgetlab container".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported container version {version} (expected {VERSION})"
            )));
        }
        let meta_len = r.u32()? as usize;
        let meta_bytes = r.take(meta_len)?;
        let meta: serde_json::Value = serde_json::from_slice(meta_bytes)
            .map_err(|e| Error::Format(format!("bad meta json: {e}")))?;
        let n_sections = r.u32()?;
        let mut sections = BTreeMap::new();
        for _ in 0..n_sections {
            let name = r.str16()?;
            let n_entries = r.u32()?;
            let mut entries = BTreeMap::new();
            for _ in 0..n_entries {
                let tag = r.str16()?;
                let ndim = r.take(1)?[0] as usize;
                let mut shape = Vec::with_capacity(ndim);
                for _ in 0..ndim {
                    shape.push(r.u32()? as usize);
                }
                let numel: usize = shape.iter().product();
                if numel == 0 {
                    return Err(Error::Format(format!("entry '{tag}' has empty shape")));
                }
                let raw = r.take(numel * 8)?;
                let data: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                entries.insert(tag, Entry { shape, data });
            }
            sections.insert(name, entries);
        }
        if r.pos != buf.len() {
            return Err(Error::Format(format!(
                "trailing bytes: {} past end of container",
                buf.len() - r.pos
            )));
        }
        Ok(Container { meta, sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)
            .map_err(|e| Error::io(path, e))?
            .read_to_end(&mut buf)
            .map_err(|e| Error::io(path, e))?;
        Container::from_bytes(&buf)
    }
}

fn write_str16(out: &mut Vec<u8>, s: &str) {
    debug_assert!(s.len() <= u16::MAX as usize);
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("container truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn str16(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|e| Error::Format(format!("bad utf8: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new(serde_json::json!({"format": "test", "n": 3}));
        c.insert("params", "b.tag".into(), vec![2, 2], vec![1.0, -2.5, 0.0, 1e-300]);
        c.insert("params", "a.tag".into(), vec![3], vec![f64::MIN_POSITIVE, 0.5, -0.5]);
        c.insert("importance", "a.tag".into(), vec![3], vec![0.0, 1.0, 2.0]);
        c
    }

    #[test]
    fn round_trip_is_exact_and_byte_stable() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.meta, c.meta);
        assert_eq!(back.sections, c.sections);
        // Re-serialization is byte-identical.
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(Container::from_bytes(b"not a container").is_err());
        let bytes = sample().to_bytes();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extended = bytes.clone();
        extended.push(0);
        assert!(Container::from_bytes(&extended).is_err());
    }
}
