//! Flat binary checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  b"OSCK"
//! version    u8       FORMAT_VERSION
//! dtype      u8       4 = f32, 8 = f64
//! count      u32      number of entries
//! entry * count:
//!   name_len u32, name bytes (UTF-8)
//!   ndim     u32, dims u64 * ndim
//!   values   prod(dims) elements of dtype, little-endian, row-major
//! ```
//!
//! Entries keep insertion order. Loading into a store of the same element
//! type reproduces every value bit for bit.

use std::fs;
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::param::ParamStore;
use crate::real::{DType, Real};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"OSCK";
pub const FORMAT_VERSION: u8 = 1;

/// Named tensors in archive order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Default for Checkpoint<T> {
    fn default() -> Self {
        Checkpoint {
            entries: Vec::new(),
        }
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_store(store: &ParamStore<T>) -> Self {
        Checkpoint {
            entries: store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every entry whose name exists in `store`. With `strict`, entries
    /// unknown to the store and store parameters missing from the archive are
    /// errors. Returns the number of parameters written.
    pub fn load_into(&self, store: &mut ParamStore<T>, strict: bool) -> Result<usize> {
        let mut written = 0;
        for (name, t) in &self.entries {
            if store.id(name).is_some() {
                store.set(name, t.clone())?;
                written += 1;
            } else if strict {
                return Err(TensorError::UnknownParam(name.clone()));
            }
        }
        if strict && written != store.len() {
            let missing = store
                .iter()
                .map(|(_, p)| p.name.clone())
                .find(|n| self.get(n).is_none())
                .unwrap_or_default();
            return Err(TensorError::Checkpoint(format!("missing parameter `{missing}`")));
        }
        Ok(written)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        out.push(T::DTYPE.code());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    /// Parses an archive. Values stored with a different element type are
    /// converted.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(TensorError::Checkpoint("bad magic".into()));
        }
        let version = r.take(1)?[0];
        if version != FORMAT_VERSION {
            return Err(TensorError::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let code = r.take(1)?[0];
        let dtype = DType::from_code(code)
            .ok_or_else(|| TensorError::Checkpoint(format!("unknown dtype code {code}")))?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| TensorError::Checkpoint(format!("invalid UTF-8 name at byte {at}")))?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * dtype.size())?;
            let data: Vec<T> = match dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| T::lit(f32::read_le(c) as f64))
                    .collect(),
                DType::F64 => raw.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
            };
            entries.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(TensorError::Checkpoint(format!(
                "{} trailing bytes at offset {}",
                bytes.len() - r.pos,
                r.pos
            )));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(TensorError::Checkpoint(format!(
                "truncated at byte {} (need {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
