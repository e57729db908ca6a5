//! Binary checkpoints.
//!
//! Layout, little-endian throughout:
//! `"RPMC"`, `u32` version, `u32` length + UTF-8 `key = value` config block, `u32` tensor count,
//! then per tensor `u32` length + UTF-8 name, `u8` rank, `rank x u32` dims, raw `f32` data.
//!
//! The config block holds the model configuration plus `meta.*` training keys. Optimizer
//! velocities, when present, are stored as tensors named `optim.velocity.<param>`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::config::{model_config_from_kv, model_config_to_text, parse_kv};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;
use crate::trainer::OptimizerState;

pub const MAGIC: &[u8; 4] = b"RPMC";
pub const VERSION: u32 = 1;
const VELOCITY: &str = "optim.velocity.";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainMeta {
    pub epoch: usize,
    pub step: usize,
    pub seed: u64,
    /// Mean loss of the last epoch.
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<OptimizerState>,
    pub meta: TrainMeta,
}

impl Checkpoint {
    pub fn from_params(params: &ModelParams<f32>, optimizer: Option<&OptimizerState>, meta: TrainMeta) -> Self {
        Self {
            config: params.config.clone(),
            tensors: params
                .named_tensors()
                .into_iter()
                .map(|(n, _, t)| (n, t.clone()))
                .collect(),
            optimizer: optimizer.cloned(),
            meta,
        }
    }

    /// Model parameters, checking every tensor against the shapes `config` implies.
    pub fn to_params(&self) -> Result<ModelParams<f32>> {
        let mut params = ModelParams::<f32>::new(&self.config)?;
        let expected: BTreeMap<String, Vec<usize>> = params
            .named_tensors()
            .into_iter()
            .map(|(n, _, t)| (n, t.shape().to_vec()))
            .collect();
        for (name, t) in &self.tensors {
            match expected.get(name) {
                None => {
                    return Err(Error::TensorMismatch {
                        name: name.clone(),
                        detail: format!("not part of a `{}` model", self.config.variant),
                    })
                }
                Some(shape) if shape.as_slice() != t.shape() => {
                    return Err(Error::TensorMismatch {
                        name: name.clone(),
                        detail: format!("shape {:?}, expected {shape:?}", t.shape()),
                    })
                }
                Some(_) => {}
            }
        }
        let stored: BTreeMap<&str, &Tensor<f32>> = self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, _, slot) in params.named_tensors_mut() {
            let t = stored.get(name.as_str()).ok_or_else(|| Error::TensorMismatch {
                name: name.clone(),
                detail: "missing".into(),
            })?;
            *slot = (*t).clone();
        }
        Ok(params)
    }

    fn config_text(&self) -> String {
        let mut s = model_config_to_text(&self.config);
        s.push_str(&format!("meta.epoch = {}\n", self.meta.epoch));
        s.push_str(&format!("meta.step = {}\n", self.meta.step));
        s.push_str(&format!("meta.seed = {}\n", self.meta.seed));
        s.push_str(&format!("meta.loss = {:e}\n", self.meta.loss));
        if let Some(o) = &self.optimizer {
            s.push_str(&format!("optim.epoch = {}\noptim.step = {}\n", o.epoch, o.step));
        }
        s
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let config = self.config_text();
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        let velocities: Vec<(String, &Tensor<f32>)> = self
            .optimizer
            .iter()
            .flat_map(|o| o.velocity.iter().map(|(n, t)| (format!("{VELOCITY}{n}"), t)))
            .collect();
        let all = self.tensors.iter().map(|(n, t)| (n.clone(), t)).chain(velocities);
        let all: Vec<_> = all.collect();
        out.extend_from_slice(&(all.len() as u32).to_le_bytes());
        for (name, t) in all {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Decodes and validates against the embedded configuration.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        Self::decode(bytes, path, None)
    }

    /// Decodes and validates against `expected`, e.g. the configuration a caller means to run.
    pub fn from_bytes_for(bytes: &[u8], path: &Path, expected: &ModelConfig) -> Result<Self> {
        Self::decode(bytes, path, Some(expected))
    }

    fn decode(bytes: &[u8], path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let n = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(n)?).map_err(|_| Error::format(path, "config block is not UTF-8"))?;
        let pairs = parse_kv(text).map_err(|e| Error::format(path, e.to_string()))?;
        let (meta_pairs, model_pairs): (Vec<_>, Vec<_>) = pairs.into_iter().partition(|(k, _)| k.starts_with("meta.") || k.starts_with("optim."));
        let stored = model_config_from_kv(&model_pairs).map_err(|e| Error::format(path, e.to_string()))?;
        let meta_get = |key: &str| meta_pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let num = |key: &str| -> Result<f64> {
            meta_get(key)
                .unwrap_or("0")
                .parse()
                .map_err(|_| Error::format(path, format!("bad `{key}`")))
        };
        let meta = TrainMeta {
            epoch: num("meta.epoch")? as usize,
            step: num("meta.step")? as usize,
            seed: meta_get("meta.seed").unwrap_or("0").parse().map_err(|_| Error::format(path, "bad `meta.seed`"))?,
            loss: num("meta.loss")?,
        };
        let mut optimizer = meta_get("optim.step").is_some().then(|| OptimizerState::default());
        if let Some(o) = optimizer.as_mut() {
            o.epoch = num("optim.epoch")? as usize;
            o.step = num("optim.step")? as usize;
        }

        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let bytes_len = dims
                .iter()
                .try_fold(4usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::format(path, format!("tensor `{name}` has absurd dims {dims:?}")))?;
            let raw = r.take(bytes_len)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::new(dims, data)?;
            match (name.strip_prefix(VELOCITY), optimizer.as_mut()) {
                (Some(p), Some(o)) => {
                    o.velocity.insert(p.to_string(), t);
                }
                (Some(_), None) => return Err(Error::format(path, format!("velocity `{name}` without optimizer state"))),
                _ => tensors.push((name, t)),
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let ckpt = Checkpoint {
            config: expected.cloned().unwrap_or(stored),
            tensors,
            optimizer,
            meta,
        };
        ckpt.to_params().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(ckpt)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(self.path, format!("truncated: need {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

/// Loads and checks every tensor against `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes_for(&bytes, path, expected)
}
