//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes   "REMOECKP"
//! version    u32 LE
//! config     u64 LE length + UTF-8 TOML of MoEConfig
//! step       u64 LE
//! controller u8 flag, then lambda, alpha, target, last_sparsity (NaN if none) as f64 LE and step u64 LE
//! params     u32 LE count, then per tensor:
//!            u32 name length + name, u32 rank + u64 dims, f64 LE values
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use super::config::MoEConfig;
use super::params::ModelParams;
use crate::autodiff::Tensor;
use crate::error::{LabError, Result};
use crate::regularization::SparsityController;

pub const MAGIC: &[u8; 8] = b"REMOECKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub controller: Option<SparsityController>,
    pub step: u64,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, FORMAT_VERSION);
        let cfg = toml::to_string(&self.params.config)
            .map_err(|e| LabError::Invariant(format!("config serialization: {e}")))?;
        put_u64(&mut buf, cfg.len() as u64);
        buf.extend_from_slice(cfg.as_bytes());
        put_u64(&mut buf, self.step);
        match &self.controller {
            None => buf.push(0),
            Some(c) => {
                buf.push(1);
                put_f64(&mut buf, c.lambda);
                put_f64(&mut buf, c.alpha);
                put_f64(&mut buf, c.target_sparsity);
                put_f64(&mut buf, c.last_sparsity.unwrap_or(f64::NAN));
                put_u64(&mut buf, c.step);
            }
        }
        let named = self.params.named();
        put_u32(&mut buf, named.len() as u32);
        for (name, t) in named {
            put_u32(&mut buf, name.len() as u32);
            buf.extend_from_slice(name.as_bytes());
            put_u32(&mut buf, t.shape().len() as u32);
            for &d in t.shape() {
                put_u64(&mut buf, d as u64);
            }
            for &v in t.data() {
                put_f64(&mut buf, v);
            }
        }
        Ok(buf)
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: &str| LabError::Format {
            path: origin.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut r = Cursor::new(bytes);
        let mut take = |n: usize| -> Result<Vec<u8>> {
            let mut b = vec![0u8; n];
            r.read_exact(&mut b).map_err(|_| bad("truncated"))?;
            Ok(b)
        };
        if take(8)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_of = |b: Vec<u8>| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let u64_of = |b: Vec<u8>| u64::from_le_bytes(b.try_into().expect("8 bytes"));
        let f64_of = |b: Vec<u8>| f64::from_le_bytes(b.try_into().expect("8 bytes"));
        let version = u32_of(take(4)?);
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let cfg_len = u64_of(take(8)?) as usize;
        let cfg_text = String::from_utf8(take(cfg_len)?).map_err(|_| bad("config is not UTF-8"))?;
        let config: MoEConfig = toml::from_str(&cfg_text).map_err(|e| bad(&format!("config: {e}")))?;
        let step = u64_of(take(8)?);
        let controller = match take(1)?[0] {
            0 => None,
            1 => {
                let lambda = f64_of(take(8)?);
                let alpha = f64_of(take(8)?);
                let target_sparsity = f64_of(take(8)?);
                let last = f64_of(take(8)?);
                let cstep = u64_of(take(8)?);
                Some(SparsityController {
                    lambda,
                    alpha,
                    target_sparsity,
                    last_sparsity: (!last.is_nan()).then_some(last),
                    step: cstep,
                })
            }
            _ => return Err(bad("bad controller flag")),
        };
        let mut params = ModelParams::init(&config)?;
        let expected: Vec<(String, Vec<usize>)> = params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let count = u32_of(take(4)?) as usize;
        if count != expected.len() {
            return Err(bad(&format!("{count} tensors, config implies {}", expected.len())));
        }
        let mut loaded = Vec::with_capacity(count);
        for (want_name, want_shape) in &expected {
            let name_len = u32_of(take(4)?) as usize;
            let name = String::from_utf8(take(name_len)?).map_err(|_| bad("tensor name is not UTF-8"))?;
            if &name != want_name {
                return Err(bad(&format!("expected tensor {want_name}, found {name}")));
            }
            let rank = u32_of(take(4)?) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64_of(take(8)?) as usize);
            }
            if &shape != want_shape {
                return Err(bad(&format!("{name}: shape {shape:?}, expected {want_shape:?}")));
            }
            let n: usize = shape.iter().product();
            let raw = take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            loaded.push(Tensor::new(shape, data)?);
        }
        for (slot, t) in params.tensors_mut().into_iter().zip(loaded) {
            *slot = t;
        }
        Ok(Self {
            params,
            controller,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?).map_err(|e| LabError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
        Self::decode(&bytes, path)
    }
}
