//! Versioned binary checkpoints.
//!
//! ```text
//! "IQFC" | u32 version | u32 len | model config JSON | u32 len | metadata
//! u32 tensor count, then per tensor: u16 name len | name | u32 rows | u32 cols | f64 values
//! u64 optimizer step | per tensor: u8 has moments [| m values | v values]
//! u32 crc32 of everything above
//! ```
//! Values are stored as `f64` whatever the in-memory scalar.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use super::model::ModelConfig;
use super::optim::AdamWState;
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"IQFC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T = f32> {
    pub model: ModelConfig,
    /// Free-form metadata, JSON by convention (task heads, run info).
    pub meta: String,
    pub store: ParamStore<T>,
    pub optimizer: AdamWState<T>,
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    for x in &t.data {
        out.extend_from_slice(&x.as_f64().to_le_bytes());
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.model).expect("config serializes");
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        for (name, t) in self.store.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols as u32).to_le_bytes());
            put_tensor(&mut out, t);
        }
        out.extend_from_slice(&self.optimizer.step.to_le_bytes());
        for pid in 0..self.store.len() {
            match (self.optimizer.m.get(pid), self.optimizer.v.get(pid)) {
                (Some(Some(m)), Some(Some(v))) => {
                    out.push(1);
                    put_tensor(&mut out, m);
                    put_tensor(&mut out, v);
                }
                _ => out.push(0),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Cursor::new(&body[4..]);
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let len = read_u32(&mut r)? as usize;
        let cfg = read_bytes(&mut r, len)?;
        let model: ModelConfig =
            serde_json::from_slice(&cfg).map_err(|e| Error::Checkpoint(format!("bad model config: {e}")))?;
        let len = read_u32(&mut r)? as usize;
        let meta = String::from_utf8(read_bytes(&mut r, len)?)
            .map_err(|_| bad("metadata is not UTF-8"))?;
        let n = read_u32(&mut r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let mut len = [0u8; 2];
            r.read_exact(&mut len).map_err(|_| bad("truncated"))?;
            let name = String::from_utf8(read_bytes(&mut r, u16::from_le_bytes(len) as usize)?)
                .map_err(|_| bad("parameter name is not UTF-8"))?;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            store.add(name, read_tensor(&mut r, rows, cols)?);
        }
        let mut step = [0u8; 8];
        r.read_exact(&mut step).map_err(|_| bad("truncated"))?;
        let mut optimizer = AdamWState { step: u64::from_le_bytes(step), m: Vec::new(), v: Vec::new() };
        for pid in 0..n {
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag).map_err(|_| bad("truncated"))?;
            if flag[0] == 1 {
                let (rows, cols) = store.tensor(pid).shape();
                optimizer.m.push(Some(read_tensor(&mut r, rows, cols)?));
                optimizer.v.push(Some(read_tensor(&mut r, rows, cols)?));
            } else {
                optimizer.m.push(None);
                optimizer.v.push(None);
            }
        }
        if (r.position() as usize) != body.len() - 4 {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { model, meta, store, optimizer })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Checkpoint("truncated".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(|_| Error::Checkpoint("truncated".into()))?;
    Ok(b)
}

fn read_tensor<T: Scalar>(r: &mut impl Read, rows: usize, cols: usize) -> Result<Tensor<T>> {
    let raw = read_bytes(r, rows * cols * 8)?;
    let data = raw.chunks_exact(8).map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes")))).collect();
    Ok(Tensor { rows, cols, data })
}
