//! Binary checkpoint: `GAIRCKPT`, version, step, config (+ sha256), named
//! parameters, optimizer moments, memory bank, RNG counter, and a trailing
//! sha256 over everything before it. All integers little-endian.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::optim::{AdamW, AdamWConfig};
use crate::autodiff::Tensor;
use crate::config::RunConfig;
use crate::datagen::{write_file, Reader};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objectives::MemoryBank;
use crate::params::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GAIRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub store: ParamStore<f32>,
    pub optimizer: AdamW<f32>,
    pub bank: MemoryBank<f32>,
    pub rng_seed: u64,
    /// Counter of the next augmentation/permutation stream to draw.
    pub rng_counter: u64,
}

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, x: u64) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn adamw_config(c: &RunConfig) -> AdamWConfig {
    AdamWConfig {
        beta1: c.beta1,
        beta2: c.beta2,
        eps: c.adam_eps,
        weight_decay: c.weight_decay,
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u64(&mut out, self.step);
        let json = self.config.to_json();
        put_u64(&mut out, json.len() as u64);
        out.extend_from_slice(json.as_bytes());
        out.extend_from_slice(&self.config.hash());
        put_u32(&mut out, self.store.len() as u32);
        for (_, p) in self.store.iter() {
            put_u32(&mut out, p.name.len() as u32);
            out.extend_from_slice(p.name.as_bytes());
            out.push(p.trainable as u8);
            put_u32(&mut out, p.value.ndim() as u32);
            for &d in p.value.shape() {
                put_u64(&mut out, d as u64);
            }
            put_f32s(&mut out, p.value.data());
        }
        put_u64(&mut out, self.optimizer.t);
        for (m, v) in self.optimizer.m.iter().zip(&self.optimizer.v) {
            put_f32s(&mut out, m);
            put_f32s(&mut out, v);
        }
        put_u64(&mut out, self.bank.capacity() as u64);
        put_u64(&mut out, self.bank.dim() as u64);
        put_u64(&mut out, self.bank.len() as u64);
        for row in self.bank.entries() {
            put_f32s(&mut out, row);
        }
        put_u64(&mut out, self.rng_seed);
        put_u64(&mut out, self.rng_counter);
        let digest: [u8; 32] = Sha256::digest(&out).into();
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.bytes(8, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format(0, format!("bad checkpoint magic {magic:?}")));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < 32 {
            return Err(Error::format(bytes.len() as u64, "truncated checkpoint"));
        }
        let body_len = bytes.len() - 32;
        let digest: [u8; 32] = Sha256::digest(&bytes[..body_len]).into();
        if digest[..] != bytes[body_len..] {
            return Err(Error::format(body_len as u64, "checksum mismatch (corrupt or truncated file)"));
        }
        let mut r = Reader::new(&bytes[..body_len]);
        r.bytes(12, "header")?;
        let step = r.u64("step")?;
        let at = r.offset();
        let json_len = r.u64("config length")? as usize;
        let json = r.bytes(json_len, "config")?;
        let config: RunConfig = serde_json::from_slice(json)
            .map_err(|e| Error::format(at + 8, format!("config: {e}")))?;
        let at = r.offset();
        let hash = r.bytes(32, "config hash")?;
        if hash != config.hash() {
            return Err(Error::format(at, "config hash does not match the stored config"));
        }
        let n_params = r.u32("parameter count")? as usize;
        let mut store = ParamStore::new();
        for _ in 0..n_params {
            let at = r.offset();
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.bytes(name_len, "name")?)
                .map_err(|_| Error::format(at, "parameter name is not UTF-8"))?
                .to_string();
            if store.id(&name).is_some() {
                return Err(Error::format(at, format!("duplicate parameter {name}")));
            }
            let trainable = match r.bytes(1, "trainable flag")?[0] {
                0 => false,
                1 => true,
                b => return Err(Error::format(r.offset() - 1, format!("bad flag byte {b}"))),
            };
            let ndim = r.u32("rank")? as usize;
            if ndim == 0 || ndim > 8 {
                return Err(Error::format(r.offset() - 4, format!("implausible rank {ndim}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64("dimension")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n > 0 && n <= r.remaining() / 4)
                .ok_or_else(|| Error::format(r.offset(), format!("implausible shape {shape:?}")))?;
            let data = r.f32s(numel, "parameter data")?;
            store.add(name, Tensor::new(shape, data)?, trainable);
        }
        let t = r.u64("optimizer step")?;
        let mut m = Vec::with_capacity(store.len());
        let mut v = Vec::with_capacity(store.len());
        for (_, p) in store.iter() {
            m.push(r.f32s(p.value.numel(), "first moment")?);
            v.push(r.f32s(p.value.numel(), "second moment")?);
        }
        let optimizer = AdamW {
            cfg: adamw_config(&config),
            t,
            m,
            v,
        };
        let at = r.offset();
        let capacity = r.u64("bank capacity")? as usize;
        let dim = r.u64("bank dim")? as usize;
        let len = r.u64("bank length")? as usize;
        if len > capacity || dim == 0 || len.saturating_mul(dim) > r.remaining() / 4 {
            return Err(Error::format(at, "inconsistent memory bank header"));
        }
        let rows = (0..len)
            .map(|_| r.f32s(dim, "bank entry"))
            .collect::<Result<Vec<_>>>()?;
        let bank = MemoryBank::from_parts(capacity, dim, rows).map_err(|e| Error::format(at, e.to_string()))?;
        let rng_seed = r.u64("rng seed")?;
        let rng_counter = r.u64("rng counter")?;
        if r.remaining() != 0 {
            return Err(Error::format(r.offset(), "trailing bytes"));
        }
        Ok(Self {
            config,
            step,
            store,
            optimizer,
            bank,
            rng_seed,
            rng_counter,
        })
    }

    /// Rebuilds the model layout from the stored config and loads the weights.
    pub fn restore_model(&self) -> Result<(Model, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let model = Model::build(self.config.model(), &mut store, self.config.seed)?;
        store.load_values(&self.store)?;
        Ok((model, store))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_file(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
