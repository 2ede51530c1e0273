//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SHRP" | version u32 | config_len u32 | config utf-8
//! rng_seed [u8; 32] | rng_stream u64 | rng_word_pos u128 | epoch u64
//! n_tensors u32 | n × (name_len u32 | name | dtype u8 | ndim u32 | dims u64.. | payload)
//! ```
//!
//! dtype 0 is f32 and 1 is f64. Tensors are always written as f64.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::Adam;
use crate::runconfig::RunConfig;
use crate::tensor::Tensor;
use crate::training::Trainer;

pub const MAGIC: &[u8; 4] = b"SHRP";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    pub epoch: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        b.extend_from_slice(self.config.as_bytes());
        b.extend_from_slice(&self.rng_seed);
        b.extend_from_slice(&self.rng_stream.to_le_bytes());
        b.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        b.extend_from_slice(&self.epoch.to_le_bytes());
        b.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.push(DTYPE_F64);
            b.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("missing SHRP magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let n = r.u32()? as usize;
        let config =
            String::from_utf8(r.take(n)?.to_vec()).map_err(|_| bad("config is not utf-8"))?;
        let rng_seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let rng_stream = r.u64()?;
        let rng_word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let epoch = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| bad("tensor name is not utf-8"))?;
            let dtype = r.take(1)?[0];
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                shape.push(usize::try_from(r.u64()?).map_err(|_| bad("dimension overflow"))?);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| bad("tensor size overflow"))?;
            let data = match dtype {
                DTYPE_F64 => r
                    .take(
                        len.checked_mul(8)
                            .ok_or_else(|| bad("tensor size overflow"))?,
                    )?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                DTYPE_F32 => r
                    .take(
                        len.checked_mul(4)
                            .ok_or_else(|| bad("tensor size overflow"))?,
                    )?
                    .chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                    .collect(),
                other => return Err(bad(&format!("unknown dtype tag {other}"))),
            };
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            config,
            rng_seed,
            rng_stream,
            rng_word_pos,
            epoch,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    /// Full training state: parameters, optimizer moments, shuffle generator, epoch.
    pub fn from_trainer(trainer: &Trainer, run: &RunConfig) -> Self {
        let store = &trainer.model.store;
        let mut tensors: Vec<(String, Tensor)> = store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect();
        for (id, p) in store.iter() {
            tensors.push((
                format!("adam.m/{}", p.name),
                trainer.adam.m[id.index()].clone(),
            ));
            tensors.push((
                format!("adam.v/{}", p.name),
                trainer.adam.v[id.index()].clone(),
            ));
        }
        tensors.push(("adam.step".into(), Tensor::scalar(trainer.adam.step as f64)));
        Self {
            config: run.to_text(),
            rng_seed: trainer.rng.get_seed(),
            rng_stream: trainer.rng.get_stream(),
            rng_word_pos: trainer.rng.get_word_pos(),
            epoch: trainer.epoch as u64,
            tensors,
        }
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::parse_text(&self.config)
    }

    /// Model parameters only, for inference.
    pub fn to_model(&self) -> Result<(RunConfig, Model)> {
        let run = self.run_config()?;
        let mut model = Model::new(run.model.clone(), run.seed)?;
        model.store.load_named(&self.tensors)?;
        Ok((run, model))
    }

    /// Restores a trainer that continues exactly where the saved one stopped.
    pub fn to_trainer(&self) -> Result<(RunConfig, Trainer)> {
        let (run, model) = self.to_model()?;
        let mut adam = Adam::new(&model.store);
        for (id, p) in model.store.iter() {
            for (slot, prefix) in [(&mut adam.m, "adam.m/"), (&mut adam.v, "adam.v/")] {
                let name = format!("{prefix}{}", p.name);
                let t = self
                    .tensor(&name)
                    .ok_or_else(|| bad(&format!("missing `{name}`")))?;
                if t.shape() != p.value.shape() {
                    return Err(bad(&format!("`{name}` has shape {:?}", t.shape())));
                }
                slot[id.index()] = t.clone();
            }
        }
        adam.step = self
            .tensor("adam.step")
            .ok_or_else(|| bad("missing `adam.step`"))?
            .item() as u64;
        let mut trainer = Trainer::new(model, run.train.clone(), run.seed)?;
        trainer.adam = adam;
        let mut rng: ChaCha8Rng = rand::SeedableRng::from_seed(self.rng_seed);
        rng.set_stream(self.rng_stream);
        rng.set_word_pos(self.rng_word_pos);
        trainer.rng = rng;
        trainer.epoch = self.epoch as usize;
        Ok((run, trainer))
    }
}

fn bad(detail: &str) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.to_string(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad("truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
