//! Self-describing binary container of named f32 tensors.
//!
//! Layout: magic "AASN", format version u32 LE, u32 header byte length +
//! UTF-8 header text (free-form, typically the run config), u32 entry
//! count, then per entry: u32 name length + name bytes, 4 x u32 dims
//! (N,C,H,W), then numel f32 values. All integers and floats little-endian.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"AASN";
pub const VERSION: u32 = 1;

pub struct Checkpoint {
    pub header: String,
    /// Insertion order preserved for writing; lookups by name.
    pub entries: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(header: String) -> Self {
        Checkpoint { header, entries: Vec::new() }
    }

    pub fn push(&mut self, name: &str, t: Tensor<f32>) -> Result<()> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::Format(format!("duplicate checkpoint entry '{name}'")));
        }
        self.entries.push((name.to_string(), t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Names not yet consumed by `take`; used to report unknown entries.
    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let hdr = self.header.as_bytes();
        buf.extend_from_slice(&(hdr.len() as u32).to_le_bytes());
        buf.extend_from_slice(hdr);
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            let nb = name.as_bytes();
            buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
            buf.extend_from_slice(nb);
            let s = t.shape();
            for d in [s.n, s.c, s.h, s.w] {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        let magic = cur.take_bytes(4)?;
        if magic != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = cur.take_u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "checkpoint format version {version}, this build reads {VERSION}"
            )));
        }
        let hlen = cur.take_u32()? as usize;
        let header = String::from_utf8(cur.take_bytes(hlen)?.to_vec())
            .map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;
        let count = cur.take_u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        let mut seen = BTreeMap::new();
        for i in 0..count {
            let nlen = cur.take_u32()? as usize;
            let name = String::from_utf8(cur.take_bytes(nlen)?.to_vec())
                .map_err(|_| Error::Format(format!("entry {i}: name is not UTF-8")))?;
            if seen.insert(name.clone(), ()).is_some() {
                return Err(Error::Format(format!("duplicate entry '{name}'")));
            }
            let mut dims = [0usize; 4];
            for d in dims.iter_mut() {
                *d = cur.take_u32()? as usize;
            }
            let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
            let mut data = vec![0f32; shape.numel()];
            for v in data.iter_mut() {
                let b = cur.take_bytes(4)?;
                *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            }
            entries.push((name, Tensor::constant(shape, data)?));
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last entry",
                bytes.len() - cur.pos
            )));
        }
        Ok(Checkpoint { header, entries })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take_bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated file: wanted {} bytes at offset {}, file has {}",
                n,
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn take_u32(&mut self) -> Result<u32> {
        let b = self.take_bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
