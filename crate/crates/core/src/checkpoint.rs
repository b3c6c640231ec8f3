//! Versioned binary checkpoints: string metadata plus named f64 tensors.
//!
//! Byte layout (all integers little-endian):
//! ```text
//! magic   8  bytes  "KGQACKP1"
//! u32     metadata entry count
//! entry   u32 key length, key bytes (UTF-8),
//!         u32 value length, value bytes (UTF-8)     × count, key-sorted
//! u32     tensor count
//! tensor  u32 name length, name bytes (UTF-8),
//!         u32 rank, rank × u64 dimensions,
//!         numel × f64 values (to_le_bytes)          × count, name-sorted
//! ```
//! Sorted sections and exact f64 bit copies make save → load → save
//! byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path as FsPath;

use crate::numerics::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"KGQACKP1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad magic bytes; not a checkpoint file")]
    BadMagic,
    #[error("truncated checkpoint: {0}")]
    Truncated(&'static str),
    #[error("invalid utf-8 in {0}")]
    BadUtf8(&'static str),
    #[error("non-finite value in tensor {name:?}")]
    NonFinite { name: String },
    #[error("duplicate tensor {name:?}")]
    DuplicateTensor { name: String },
    #[error("size overflow reading {0}")]
    Overflow(&'static str),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Collects every parameter of a store, named as stored.
    pub fn from_store(store: &ParamStore) -> Self {
        let mut tensors = BTreeMap::new();
        for id in store.sorted_ids() {
            tensors.insert(store.name(id).to_string(), store.value(id).clone());
        }
        Checkpoint {
            meta: BTreeMap::new(),
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            write_str(&mut out, k);
            write_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &self.tensors {
            write_str(&mut out, name);
            out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in tensor.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let meta_count = r.u32("metadata count")?;
        let mut meta = BTreeMap::new();
        for _ in 0..meta_count {
            let k = r.string("metadata key")?;
            let v = r.string("metadata value")?;
            meta.insert(k, v);
        }
        let tensor_count = r.u32("tensor count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..tensor_count {
            let name = r.string("tensor name")?;
            let rank = r.u32("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            let mut numel: usize = 1;
            for _ in 0..rank {
                let d = r.u64("dimension")? as usize;
                numel = numel
                    .checked_mul(d)
                    .ok_or(CheckpointError::Overflow("tensor shape"))?;
                shape.push(d);
            }
            let mut values = Vec::with_capacity(numel);
            for _ in 0..numel {
                values.push(f64::from_le_bytes(
                    r.take(8)?.try_into().expect("8 bytes"),
                ));
            }
            let tensor = Tensor::from_values(&shape, values)
                .map_err(|_| CheckpointError::NonFinite { name: name.clone() })?;
            if tensors.insert(name.clone(), tensor).is_some() {
                return Err(CheckpointError::DuplicateTensor { name });
            }
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Truncated("trailing bytes after payload"));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &FsPath) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &FsPath) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .ok_or(CheckpointError::Overflow("offset"))?;
        if end > self.bytes.len() {
            return Err(CheckpointError::Truncated("unexpected end of file"));
        }
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        let b = self
            .take(4)
            .map_err(|_| CheckpointError::Truncated(what))?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        let b = self
            .take(8)
            .map_err(|_| CheckpointError::Truncated(what))?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &'static str) -> Result<String, CheckpointError> {
        let len = self.u32(what)? as usize;
        let b = self
            .take(len)
            .map_err(|_| CheckpointError::Truncated(what))?;
        String::from_utf8(b.to_vec()).map_err(|_| CheckpointError::BadUtf8(what))
    }
}

/// Encodes an f64 exactly as hex bits for metadata fields.
pub fn f64_to_meta(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

pub fn f64_from_meta(s: &str) -> Option<f64> {
    u64::from_str_radix(s, 16).ok().map(f64::from_bits)
}
