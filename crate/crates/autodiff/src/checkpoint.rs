//! Versioned binary container for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  b"RLCKPT\0\0"
//! version    u32
//! meta_len   u64      followed by `meta_len` bytes of UTF-8 JSON
//! count      u32      number of tensors
//! per tensor:
//!   name_len u32, name bytes (UTF-8)
//!   ndim     u32, dims as u64 × ndim
//!   data     f64 × prod(dims), little-endian
//! ```
//!
//! Optimizer state, the global step and any caller metadata live in the JSON
//! header or as extra tensors with reserved prefixes (`adam.m.`, `adam.v.`).

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde_json::{Map, Value};

use crate::adam::{AdamConfig, AdamState};
use crate::error::{AutodiffError, Result};
use crate::params::ParamSet;

pub const MAGIC: &[u8; 8] = b"RLCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: Map<String, Value>,
    pub tensors: Vec<(String, Array2<f64>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_params(&mut self, prefix: &str, params: &ParamSet) {
        for (name, v) in params.iter() {
            self.tensors.push((format!("{prefix}{name}"), v.clone()));
        }
    }

    /// Collects every tensor whose name starts with `prefix`.
    pub fn params(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, v) in &self.tensors {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.insert(rest, v.clone());
            }
        }
        out
    }

    pub fn tensor(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn push_adam(&mut self, names: &[String], state: &AdamState) {
        self.meta
            .insert("adam.step".into(), Value::from(state.step));
        self.meta
            .insert("adam.lr".into(), Value::from(state.config.lr));
        self.meta
            .insert("adam.beta1".into(), Value::from(state.config.beta1));
        self.meta
            .insert("adam.beta2".into(), Value::from(state.config.beta2));
        self.meta
            .insert("adam.eps".into(), Value::from(state.config.eps));
        for (i, name) in names.iter().enumerate() {
            self.tensors
                .push((format!("adam.m.{name}"), state.m[i].clone()));
            self.tensors
                .push((format!("adam.v.{name}"), state.v[i].clone()));
        }
    }

    /// Restores Adam state for `names`, if present.
    pub fn adam(&self, names: &[String]) -> Option<AdamState> {
        let num = |k: &str| self.meta.get(k).and_then(Value::as_f64);
        let config = AdamConfig {
            lr: num("adam.lr")?,
            beta1: num("adam.beta1")?,
            beta2: num("adam.beta2")?,
            eps: num("adam.eps")?,
        };
        let step = self.meta.get("adam.step")?.as_u64()?;
        let mut m = Vec::with_capacity(names.len());
        let mut v = Vec::with_capacity(names.len());
        for name in names {
            m.push(self.tensor(&format!("adam.m.{name}"))?.clone());
            v.push(self.tensor(&format!("adam.v.{name}"))?.clone());
        }
        Some(AdamState { config, step, m, v })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let meta =
            serde_json::to_vec(&self.meta).map_err(|e| AutodiffError::Format(e.to_string()))?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&2u32.to_le_bytes())?;
            w.write_all(&(t.nrows() as u64).to_le_bytes())?;
            w.write_all(&(t.ncols() as u64).to_le_bytes())?;
            let mut buf = Vec::with_capacity(t.len() * 8);
            for x in t.iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(AutodiffError::Format("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(AutodiffError::Format(format!(
                "unsupported version {version}"
            )));
        }
        let meta_len = read_u64(r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let meta: Map<String, Value> =
            serde_json::from_slice(&meta).map_err(|e| AutodiffError::Format(e.to_string()))?;
        let count = read_u32(r)?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| AutodiffError::Format(e.to_string()))?;
            let ndim = read_u32(r)? as usize;
            let dims: Vec<usize> = (0..ndim)
                .map(|_| read_u64(r).map(|d| d as usize))
                .collect::<Result<_>>()?;
            let (rows, cols) = match dims.as_slice() {
                [] => (1, 1),
                [n] => (1, *n),
                [r, c] => (*r, *c),
                _ => {
                    return Err(AutodiffError::Format(format!(
                        "tensor `{name}` has {ndim} dims; only up to 2 supported"
                    )))
                }
            };
            let mut raw = vec![0u8; rows * cols * 8];
            r.read_exact(&mut raw)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Array2::from_shape_vec((rows, cols), data)
                .map_err(|e| AutodiffError::Format(e.to_string()))?;
            tensors.push((name, t));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
