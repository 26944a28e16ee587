//! Binary checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "SKSGCKPT" | version u32
//! config: u32 byte length + JSON {encoder, training, text_seed}
//! step u64 | epoch u64 | seed u64 | tau f32
//! u32 parameter count, then per parameter:
//!     u16 name length + UTF-8 name | u8 trainable | u8 rank | u32 dims
//!     u64 payload byte length + f32 payload
//! u8 optimizer flag; when 1:
//!     f64 beta1, beta2, eps, weight_decay | u64 t
//!     u32 entry count, then per entry: name, m payload, v payload
//!     (shapes taken from the parameter of that name)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, ParamStore, TAU};
use crate::numerics::Array;
use crate::training::{AdamW, TrainState, TrainingConfig};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SKSGCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderConfig,
    pub training: TrainingConfig,
    pub text_seed: u64,
    pub params: ParamStore<f32>,
    pub step: u64,
    pub epoch: u64,
    pub optimizer: Option<AdamW<f32>>,
}

#[derive(Serialize, Deserialize)]
struct ConfigBlock {
    encoder: EncoderConfig,
    training: TrainingConfig,
    text_seed: u64,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, text_seed: u64) -> Self {
        Self {
            encoder: state.encoder.clone(),
            training: state.training.clone(),
            text_seed,
            params: state.params.clone(),
            step: state.step,
            epoch: state.epoch,
            optimizer: Some(state.optimizer.clone()),
        }
    }

    pub fn into_state(self) -> TrainState {
        let optimizer = self
            .optimizer
            .unwrap_or_else(|| AdamW::new(self.training.weight_decay));
        TrainState {
            encoder: self.encoder,
            training: self.training,
            params: self.params,
            optimizer,
            step: self.step,
            epoch: self.epoch,
        }
    }

    pub fn tau(&self) -> f32 {
        self.params.tau()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&ConfigBlock {
            encoder: self.encoder.clone(),
            training: self.training.clone(),
            text_seed: self.text_seed,
        })?;
        w.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        w.extend_from_slice(&cfg);
        w.extend_from_slice(&self.step.to_le_bytes());
        w.extend_from_slice(&self.epoch.to_le_bytes());
        w.extend_from_slice(&self.training.seed.to_le_bytes());
        w.extend_from_slice(&self.tau().to_le_bytes());

        let params: Vec<_> = self.params.iter().collect();
        w.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (name, p) in params {
            put_name(&mut w, name)?;
            w.push(p.trainable as u8);
            let shape = p.value.shape();
            w.push(shape.len() as u8);
            for &d in shape {
                w.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put_payload(&mut w, p.value.data());
        }

        match &self.optimizer {
            None => w.push(0),
            Some(opt) => {
                w.push(1);
                for x in [opt.beta1, opt.beta2, opt.eps, opt.weight_decay] {
                    w.extend_from_slice(&x.to_le_bytes());
                }
                w.extend_from_slice(&opt.t.to_le_bytes());
                w.extend_from_slice(&(opt.m.len() as u32).to_le_bytes());
                for (name, m) in &opt.m {
                    let v = opt.v.get(name).ok_or_else(|| {
                        Error::Checkpoint(format!("optimizer has no second moment for '{name}'"))
                    })?;
                    put_name(&mut w, name)?;
                    put_payload(&mut w, m.data());
                    put_payload(&mut w, v.data());
                }
            }
        }
        Ok(w)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let n = r.u32("config length")? as usize;
        let cfg: ConfigBlock = serde_json::from_slice(r.take(n, "config")?)
            .map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;
        let step = r.u64("step")?;
        let epoch = r.u64("epoch")?;
        let seed = r.u64("seed")?;
        let tau = f32::from_le_bytes(r.take(4, "tau")?.try_into().expect("4 bytes"));
        if seed != cfg.training.seed {
            return Err(Error::Checkpoint("seed field disagrees with config".into()));
        }

        let mut params = ParamStore::empty();
        let count = r.u32("parameter count")?;
        for _ in 0..count {
            let name = r.name()?;
            let trainable = match r.take(1, &name)?[0] {
                0 => false,
                1 => true,
                b => return Err(Error::Checkpoint(format!("'{name}': bad trainable flag {b}"))),
            };
            let rank = r.take(1, &name)?[0] as usize;
            let shape = (0..rank)
                .map(|_| r.u32(&name).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let data = r.payload(&name, shape.iter().product())?;
            let value = Array::new(shape, data)
                .map_err(|e| Error::Checkpoint(format!("'{name}': {e}")))?;
            params.insert(name, value, trainable);
        }
        params.check_layout(&cfg.encoder)?;
        if params.tau().to_bits() != tau.to_bits() {
            return Err(Error::Checkpoint("tau field disagrees with parameter table".into()));
        }
        if params.get(TAU)?.len() != 1 {
            return Err(Error::Checkpoint("tau must be a scalar".into()));
        }

        let optimizer = match r.take(1, "optimizer flag")?[0] {
            0 => None,
            1 => {
                let mut f = [0.0f64; 4];
                for x in &mut f {
                    *x = f64::from_le_bytes(r.take(8, "optimizer")?.try_into().expect("8 bytes"));
                }
                let mut opt = AdamW::new(f[3]);
                opt.beta1 = f[0];
                opt.beta2 = f[1];
                opt.eps = f[2];
                opt.t = r.u64("optimizer step")?;
                let entries = r.u32("optimizer entries")?;
                for _ in 0..entries {
                    let name = r.name()?;
                    let shape = params
                        .get(&name)
                        .map_err(|_| Error::Checkpoint(format!("optimizer state for unknown '{name}'")))?
                        .shape()
                        .to_vec();
                    let len = shape.iter().product();
                    let m = Array::new(shape.clone(), r.payload(&name, len)?)?;
                    let v = Array::new(shape, r.payload(&name, len)?)?;
                    opt.m.insert(name.clone(), m);
                    opt.v.insert(name, v);
                }
                Some(opt)
            }
            b => return Err(Error::Checkpoint(format!("bad optimizer flag {b}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            encoder: cfg.encoder,
            training: cfg.training,
            text_seed: cfg.text_seed,
            params,
            step,
            epoch,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::load(path, e.to_string()))?;
        Self::from_bytes(&bytes)
    }
}

fn put_name(w: &mut Vec<u8>, name: &str) -> Result<()> {
    let len = u16::try_from(name.len())
        .map_err(|_| Error::Checkpoint(format!("parameter name too long: '{name}'")))?;
    w.extend_from_slice(&len.to_le_bytes());
    w.extend_from_slice(name.as_bytes());
    Ok(())
}

fn put_payload(w: &mut Vec<u8>, data: &[f32]) {
    w.extend_from_slice(&((data.len() * 4) as u64).to_le_bytes());
    for x in data {
        w.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn name(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2, "name length")?.try_into().expect("2 bytes"));
        let raw = self.take(len as usize, "name")?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Checkpoint("parameter name not UTF-8".into()))
    }

    fn payload(&mut self, name: &str, len: usize) -> Result<Vec<f32>> {
        let bytes = self.u64(name)? as usize;
        if bytes != len * 4 {
            return Err(Error::Checkpoint(format!(
                "'{name}': payload of {bytes} bytes, shape needs {}",
                len * 4
            )));
        }
        let raw = self.take(bytes, name)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}
