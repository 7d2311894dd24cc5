//! Binary weight archive.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! magic      8 bytes  "EWSRCKPT"
//! version    u32      currently 1
//! meta_len   u32      length of the JSON metadata block
//! meta       bytes    UTF-8 JSON object
//! count      u32      number of entries
//! entry*     name_len u32, name bytes (UTF-8),
//!            ndim u32, dims u32 × ndim,
//!            values f32 × prod(dims), little-endian
//! ```
//!
//! Entry names are dotted parameter paths. Shapes are compared after
//! dropping unit axes, so a `[C]` vector loads into a `[1, C, 1, 1]`
//! parameter.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 8] = b"EWSRCKPT";
pub const VERSION: u32 = 1;

/// Upper bound on a single entry, guarding against corrupt headers.
const MAX_ENTRY_VALUES: u64 = 1 << 31;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self {
            metadata,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.entries.push(Entry {
            name: name.into(),
            dims: t.shape().dims().to_vec(),
            values: t.data().iter().map(|&v| v as f32).collect(),
        });
    }

    /// Adds every parameter (trainable and running statistics) of `ps`.
    pub fn push_params(&mut self, ps: &ParamStore) {
        for (id, e) in ps.entries() {
            self.push(e.name.clone(), &ps.value(id));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Entry `name` as a tensor of the given shape.
    pub fn tensor(&self, name: &str, shape: Shape) -> Result<Tensor> {
        let e = self
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry {name}")))?;
        if squeeze(&e.dims) != squeeze(&shape.dims()) {
            return Err(Error::Checkpoint(format!(
                "entry {name} has dims {:?}, expected {shape}",
                e.dims
            )));
        }
        Tensor::from_vec(shape, e.values.iter().map(|&v| v as f64).collect())
    }

    /// Copies every parameter of `ps` from the archive. All parameters
    /// must be present; other entries (optimiser state) are ignored.
    pub fn load_into(&self, ps: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = ps.ids().collect();
        for id in ids {
            let (name, shape) = {
                let e = ps.entry(id);
                (e.name.clone(), e.shape)
            };
            let t = self.tensor(&name, shape)?;
            ps.set(id, t)?;
        }
        Ok(())
    }

    /// Copies the parameters whose names start with `prefix.` and leaves
    /// the rest untouched. Returns how many were loaded.
    pub fn load_under(&self, ps: &mut ParamStore, prefix: &str) -> Result<usize> {
        let dotted = format!("{prefix}.");
        let ids: Vec<_> = ps.ids().filter(|&id| ps.entry(id).name.starts_with(&dotted)).collect();
        if ids.is_empty() {
            return Err(Error::Checkpoint(format!("no parameters under {prefix}")));
        }
        for &id in &ids {
            let (name, shape) = {
                let e = ps.entry(id);
                (e.name.clone(), e.shape)
            };
            let t = self.tensor(&name, shape)?;
            ps.set(id, t)?;
        }
        Ok(ids.len())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.metadata)?;
        write_u32(w, meta.len())?;
        w.write_all(&meta)?;
        write_u32(w, self.entries.len())?;
        for e in &self.entries {
            write_u32(w, e.name.len())?;
            w.write_all(e.name.as_bytes())?;
            write_u32(w, e.dims.len())?;
            for &d in &e.dims {
                write_u32(w, d)?;
            }
            let mut buf = Vec::with_capacity(e.values.len() * 4);
            for v in &e.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = read_u32(r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let metadata = serde_json::from_slice(&meta)?;
        let count = read_u32(r)?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
            let ndim = read_u32(r)? as usize;
            if ndim > 8 {
                return Err(Error::Checkpoint(format!("entry {name} has {ndim} dimensions")));
            }
            let dims = (0..ndim).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = dims.iter().map(|&d| d as u64).product::<u64>();
            if numel > MAX_ENTRY_VALUES {
                return Err(Error::Checkpoint(format!("entry {name} is implausibly large")));
            }
            let mut buf = vec![0u8; numel as usize * 4];
            r.read_exact(&mut buf)?;
            let values = buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            entries.push(Entry { name, dims, values });
        }
        Ok(Self { metadata, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

fn squeeze(dims: &[usize]) -> Vec<usize> {
    dims.iter().copied().filter(|&d| d != 1).collect()
}

fn write_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_in_memory() {
        let mut c = Checkpoint::new(serde_json::json!({"epoch": 3}));
        c.push("a.weight", &Tensor::full(Shape::new(2, 1, 1, 3), 0.5));
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, c);
        let t = back.tensor("a.weight", Shape::new(1, 2, 3, 1)).unwrap();
        assert_eq!(t.data(), &[0.5; 6]);
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"NOTACKPT\x01\0\0\0".to_vec();
        assert!(matches!(Checkpoint::read_from(&mut buf.as_slice()), Err(Error::Checkpoint(_))));
    }
}
