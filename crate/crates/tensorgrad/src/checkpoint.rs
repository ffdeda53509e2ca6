//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes  "TGRADCKP"
//! version    u32      1
//! dtype      u8       8 (f64)
//! endian     u8       0 (little)
//! reserved   u16      0
//! records    u32
//! per record:
//!   name_len u32, name bytes (UTF-8)
//!   rank     u32, extents u64 × rank
//!   payload  f64 × product(extents)
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TGRADCKP";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 8;
const LITTLE_ENDIAN: u8 = 0;
const HEADER: &str = "<header>";

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + store.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F64);
    out.push(LITTLE_ENDIAN);
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, record: &str, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(corrupt(record, format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, record: &str, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, record, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, record: &str, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, record, what)?.try_into().unwrap()))
    }
}

fn corrupt(record: &str, reason: impl Into<String>) -> TensorError {
    TensorError::Checkpoint {
        record: record.to_string(),
        reason: reason.into(),
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, HEADER, "magic")? != MAGIC {
        return Err(corrupt(HEADER, "bad magic"));
    }
    let version = r.u32(HEADER, "version")?;
    if version != VERSION {
        return Err(corrupt(HEADER, format!("unsupported version {version}")));
    }
    let tags = r.take(4, HEADER, "dtype")?;
    if tags[0] != DTYPE_F64 || tags[1] != LITTLE_ENDIAN {
        return Err(corrupt(HEADER, format!("unsupported dtype/endianness {}/{}", tags[0], tags[1])));
    }
    let count = r.u32(HEADER, "record count")?;
    let mut store = ParamStore::new();
    for i in 0..count {
        let placeholder = format!("#{i}");
        let len = r.u32(&placeholder, "name length")? as usize;
        let name = std::str::from_utf8(r.take(len, &placeholder, "name")?)
            .map_err(|_| corrupt(&placeholder, "name is not UTF-8"))?
            .to_string();
        let rank = r.u32(&name, "rank")? as usize;
        if rank > 8 {
            return Err(corrupt(&name, format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64(&name, "extent")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|&n| n <= (bytes.len() - r.pos) / 8)
            .ok_or_else(|| corrupt(&name, "payload larger than file"))?;
        let payload = r.take(n * 8, &name, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| corrupt(&name, e.to_string()))?;
        store
            .insert(name.clone(), tensor)
            .map_err(|_| corrupt(&name, "duplicate record"))?;
    }
    if r.pos != bytes.len() {
        return Err(corrupt(HEADER, "trailing bytes after last record"));
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(store))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
    decode(&fs::read(path)?)
}

/// Loads `path` into a store with the names and shapes of `template`.
///
/// Every tensor of the template must be present with the same shape; the
/// error names the first offending record.
pub fn load_matching(path: impl AsRef<Path>, template: &ParamStore) -> Result<ParamStore> {
    let loaded = load(path)?;
    let mut out = template.clone();
    out.copy_from(&loaded)?;
    Ok(out)
}
