//! Checkpoint file: version header, then name -> shape + raw little-endian
//! payload per parameter.
//!
//! Layout (all integers little-endian):
//!   magic  b"ADCP"
//!   version u32 (= 1)
//!   dtype   u8 (4 = f32, 8 = f64), pad [u8; 3]
//!   count   u32
//!   per entry: name_len u16, name utf-8, ndim u8, dims u32 each, payload

use std::fs;
use std::path::Path;

use crate::error::AdError;
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::shape::numel;
use crate::Result;

const MAGIC: &[u8; 4] = b"ADCP";
const VERSION: u32 = 1;

#[derive(Debug)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Payload widened to f64 regardless of stored dtype.
    pub data: Vec<f64>,
}

pub fn save_checkpoint<T: Scalar>(store: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE);
    out.extend_from_slice(&[0u8; 3]);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(p.shape.len() as u8);
        for &d in &p.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.data.iter() {
            T::write_le(v, &mut out);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<CheckpointEntry>> {
    let bytes = fs::read(path.as_ref())?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(AdError::Checkpoint(format!(
            "bad magic {:02x?} in {}",
            magic,
            path.as_ref().display()
        )));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(AdError::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let dtype = cur.take(1)?[0];
    if dtype != 4 && dtype != 8 {
        return Err(AdError::Checkpoint(format!("unknown dtype tag {dtype}")));
    }
    cur.take(3)?;
    let count = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|e| AdError::Checkpoint(format!("invalid name: {e}")))?;
        let ndim = cur.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize);
        }
        let n = numel(&shape);
        let payload = cur.take(n * dtype as usize)?;
        let data: Vec<f64> = if dtype == 4 {
            payload
                .chunks_exact(4)
                .map(|c| f32::read_le(c) as f64)
                .collect()
        } else {
            payload.chunks_exact(8).map(f64::read_le).collect()
        };
        entries.push(CheckpointEntry { name, shape, data });
    }
    if cur.pos != bytes.len() {
        return Err(AdError::Checkpoint("trailing bytes after last entry".into()));
    }
    Ok(entries)
}

impl<T: Scalar> ParamStore<T> {
    /// Load matching entries into this store. Every checkpoint entry must
    /// name an existing parameter of identical shape; with `strict`, every
    /// store parameter must also be present in the checkpoint.
    pub fn load_from_checkpoint(&mut self, path: impl AsRef<Path>, strict: bool) -> Result<usize> {
        let entries = load_checkpoint(path)?;
        let mut loaded = vec![false; self.len()];
        for e in &entries {
            let id = self.find(&e.name).ok_or_else(|| {
                AdError::Checkpoint(format!("checkpoint entry {} not in model", e.name))
            })?;
            if self.get(id).shape != e.shape {
                return Err(AdError::Checkpoint(format!(
                    "shape mismatch for {}: model {:?} vs checkpoint {:?}",
                    e.name,
                    self.get(id).shape,
                    e.shape
                )));
            }
            let data: Vec<T> = e.data.iter().map(|&v| T::from_f64(v)).collect();
            self.set_data(id, data)?;
            loaded[id.0] = true;
        }
        if strict {
            for (id, p) in self.iter() {
                if !loaded[id.0] {
                    return Err(AdError::Checkpoint(format!(
                        "parameter {} missing from checkpoint",
                        p.name
                    )));
                }
            }
        }
        Ok(entries.len())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(AdError::Checkpoint(format!(
                "truncated payload: wanted {} bytes at offset {}, file has {}",
                n,
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}
