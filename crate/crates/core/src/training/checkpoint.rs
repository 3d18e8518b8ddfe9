//! `DRLC` checkpoint files, little-endian:
//!
//! ```text
//! "DRLC" | u32 version | u32 len, config text (UTF-8)
//! u32 n, n parameter records
//! u32 2n, optimizer moment records ("m.<name>", "v.<name>") | u64 optimizer step
//! u64 training step | 56-byte rng state | f64 loss of the last step
//! record: u32 name len, name | u8 dtype (0 = f32, 1 = f64) | u8 rank | u32 dims | data
//! ```
//!
//! Tensors are written as f64; f32 records are accepted on read.

use std::fs;
use std::path::Path;

use super::OptimState;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamStore};
use crate::tensor::{RngState, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DRLC";
pub const CHECKPOINT_VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Model,
    pub optim: OptimState,
    pub step: u64,
    pub rng: RngState,
    /// Loss of the step before saving; NaN before the first step.
    pub last_loss: f64,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_record(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F64);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::format(self.path, self.pos as u64, reason)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                self.bytes.len() as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let start = self.pos;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::format(self.path, start as u64, format!("{what} is not UTF-8")))
    }

    fn record(&mut self) -> Result<(String, Tensor)> {
        let name = self.string("tensor name")?;
        let dtype = self.u8("dtype")?;
        let rank = self.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match dtype {
            DTYPE_F64 => self
                .take(8 * n, "tensor data")?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DTYPE_F32 => self
                .take(4 * n, "tensor data")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            other => return Err(self.err(format!("unknown dtype code {other} for {name}"))),
        };
        Ok((name, Tensor::new(shape, data)?))
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        let text = self.config.to_string();
        put_u32(&mut out, text.len() as u32);
        out.extend_from_slice(text.as_bytes());
        let entries = self.model.params.entries();
        put_u32(&mut out, entries.len() as u32);
        for e in entries {
            put_record(&mut out, &e.name, &e.value);
        }
        put_u32(&mut out, 2 * entries.len() as u32);
        for (e, (m, v)) in entries.iter().zip(self.optim.m.iter().zip(&self.optim.v)) {
            put_record(&mut out, &format!("m.{}", e.name), m);
            put_record(&mut out, &format!("v.{}", e.name), v);
        }
        out.extend_from_slice(&self.optim.step.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.to_bytes());
        out.extend_from_slice(&self.last_loss.to_le_bytes());
        out
    }

    /// Decodes checkpoint bytes; `path` is only used in error messages.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::format(path, 0, "not a DRLC checkpoint"));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let config_at = r.pos;
        let text = r.string("config")?;
        let config = RunConfig::from_text(&text, &[])
            .map_err(|e| Error::format(path, config_at as u64, format!("bad config: {e}")))?;

        let params_at = r.pos;
        let n = r.u32("parameter count")? as usize;
        let mut store = ParamStore::default();
        for _ in 0..n {
            let (name, t) = r.record()?;
            store.add(name, t, false);
        }
        let model = Model::from_params(config.model.clone(), store)
            .map_err(|e| Error::format(path, params_at as u64, e.to_string()))?;

        let moments_at = r.pos;
        if r.u32("moment count")? as usize != 2 * n {
            return Err(Error::format(path, moments_at as u64, "moment count is not twice the parameter count"));
        }
        let mut optim = OptimState::for_params(config.train.optimizer, &model.params);
        for (i, e) in model.params.entries().iter().enumerate() {
            for (prefix, slot) in [("m", &mut optim.m[i]), ("v", &mut optim.v[i])] {
                let at = r.pos;
                let (name, t) = r.record()?;
                if name != format!("{prefix}.{}", e.name) || t.shape() != e.value.shape() {
                    return Err(Error::format(path, at as u64, format!("unexpected moment record {name}")));
                }
                *slot = t;
            }
        }
        optim.step = r.u64("optimizer step")?;
        let step = r.u64("step")?;
        let rng_bytes: [u8; RngState::ENCODED_LEN] =
            r.take(RngState::ENCODED_LEN, "rng state")?.try_into().unwrap();
        let last_loss = r.f64("last loss")?;
        if r.pos != bytes.len() {
            return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            config,
            model,
            optim,
            step,
            rng: RngState::from_bytes(&rng_bytes),
            last_loss,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    /// The stored model under `config`. A config that differs from the stored
    /// one is refused unless `force`, in which case parameters are still
    /// matched by name and shape.
    pub fn model_for(&self, config: &ModelConfig, force: bool) -> Result<Model> {
        if *config == self.model.config {
            return Ok(self.model.clone());
        }
        if !force {
            let a = RunConfig {
                model: self.model.config.clone(),
                ..RunConfig::default()
            };
            let b = RunConfig {
                model: config.clone(),
                ..RunConfig::default()
            };
            let diffs: Vec<String> = a
                .entries()
                .into_iter()
                .zip(b.entries())
                .filter(|((_, x), (_, y))| x != y)
                .map(|((k, x), (_, y))| format!("{k}: {x} vs {y}"))
                .collect();
            return Err(Error::ConfigMismatch(diffs.join(", ")));
        }
        Model::from_params(config.clone(), self.model.params.clone())
    }
}
