//! The `AAFW` weight file.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "AAFW" | version | count | count x (name_len | name | dtype | rank | dims.. | payload)
//! ```
//!
//! `dtype` is 0 for f32 and 1 for f64. Tensors are written in parameter order.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{DType, Real};

pub const WEIGHT_MAGIC: &[u8; 4] = b"AAFW";
pub const WEIGHT_VERSION: u32 = 1;

/// One tensor as stored on disk, before it is matched against a model.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

pub fn encode_weights<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + store.total_values() * T::DTYPE.size_of());
    out.extend_from_slice(WEIGHT_MAGIC);
    put_u32(&mut out, WEIGHT_VERSION);
    put_u32(&mut out, store.len() as u32);
    for (_, p) in store.iter() {
        put_u32(&mut out, p.name.len() as u32);
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, T::DTYPE.code());
        put_u32(&mut out, p.value.rank() as u32);
        for &d in p.value.shape() {
            put_u32(&mut out, d as u32);
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn save_weights<T: Real>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    fs::write(path, encode_weights(store)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                msg: format!(
                    "needed {n} bytes for {what} at offset {}, only {} remain",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            });
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

/// Parses a weight file without reference to any model.
pub fn decode_weights(path: &Path, bytes: &[u8]) -> Result<Vec<StoredTensor>> {
    let format = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 4 || &bytes[..4] != WEIGHT_MAGIC {
        return Err(Error::WeightMagic {
            path: path.to_path_buf(),
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    let mut r = Reader {
        path,
        bytes,
        pos: 4,
    };
    let version = r.u32("version")?;
    if version != WEIGHT_VERSION {
        return Err(Error::WeightVersion {
            path: path.to_path_buf(),
            found: version,
            expected: WEIGHT_VERSION,
        });
    }
    let count = r.u32("tensor count")? as usize;
    let mut seen = HashSet::new();
    let mut tensors = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| format(format!("tensor {i} has a non-UTF-8 name")))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(format(format!("duplicate tensor name '{name}'")));
        }
        let code = r.u32("dtype tag")?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| format(format!("tensor '{name}' has unknown dtype tag {code}")))?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size_of()))
            .ok_or_else(|| format(format!("tensor '{name}' declares an overflowing size")))?;
        let payload = r.take(numel, &format!("payload of '{name}'"))?.to_vec();
        tensors.push(StoredTensor {
            name,
            dtype,
            shape,
            payload,
        });
    }
    if r.pos != bytes.len() {
        return Err(format(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(tensors)
}

pub fn read_weight_file(path: &Path) -> Result<Vec<StoredTensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(path, &bytes)
}

/// Replaces every value in `store` with the file's contents.
///
/// The file must contain exactly the store's tensor names with matching
/// dtype and shapes. Nothing is modified unless the whole file validates.
pub fn load_weights<T: Real>(path: &Path, store: &mut ParamStore<T>) -> Result<()> {
    let tensors = read_weight_file(path)?;
    apply_weights(path, &tensors, store)
}

pub fn apply_weights<T: Real>(
    path: &Path,
    tensors: &[StoredTensor],
    store: &mut ParamStore<T>,
) -> Result<()> {
    let format = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut plan = Vec::with_capacity(tensors.len());
    for t in tensors {
        let id = store
            .find(&t.name)
            .ok_or_else(|| format(format!("unexpected tensor '{}' not in the model", t.name)))?;
        let expected = store.get(id).value.shape();
        if t.shape != expected {
            return Err(Error::WeightShape {
                name: t.name.clone(),
                expected: expected.to_vec(),
                found: t.shape.clone(),
            });
        }
        if t.dtype != T::DTYPE {
            return Err(format(format!(
                "tensor '{}' stored as {}, model uses {}",
                t.name,
                t.dtype,
                T::DTYPE
            )));
        }
        plan.push((id, t));
    }
    if tensors.len() != store.len() {
        let present: HashSet<&str> = tensors.iter().map(|t| t.name.as_str()).collect();
        let missing: Vec<&str> = store
            .iter()
            .map(|(_, p)| p.name.as_str())
            .filter(|n| !present.contains(n))
            .collect();
        return Err(format(format!("missing tensors: {}", missing.join(", "))));
    }
    let width = T::DTYPE.size_of();
    for (id, t) in plan {
        let dst = store.value_mut(id).data_mut();
        for (v, chunk) in dst.iter_mut().zip(t.payload.chunks_exact(width)) {
            *v = T::read_le(chunk);
        }
    }
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}
