//! Checkpoint container.
//!
//! Layout: the magic bytes `OVSCKPT\0`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a JSON header, then raw
//! little-endian `f64` data. For each tensor listed in the header the blob
//! holds its values followed, when `moments` is set, by the optimizer's
//! first and second moments.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::optim::{AdamW, Moments};
use super::{EvalRecord, TrainConfig};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::pipeline::ModelConfig;

pub const MAGIC: &[u8; 8] = b"OVSCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    moments: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    iteration: u64,
    model: ModelConfig,
    train: TrainConfig,
    categories: Vec<String>,
    history: Vec<EvalRecord>,
    adam_step: u64,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to rebuild a model and resume its training.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub iteration: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub categories: Vec<String>,
    pub history: Vec<EvalRecord>,
    pub params: Vec<(String, Tensor, bool)>,
    pub adam_step: u64,
    pub moments: IndexMap<String, Moments>,
}

impl Checkpoint {
    pub fn capture(
        iteration: u64,
        model: &ModelConfig,
        train: &TrainConfig,
        categories: &[String],
        history: &[EvalRecord],
        store: &ParamStore,
        opt: &AdamW,
    ) -> Self {
        Self {
            iteration,
            model: model.clone(),
            train: train.clone(),
            categories: categories.to_vec(),
            history: history.to_vec(),
            params: store
                .iter()
                .map(|(n, p)| (n.to_string(), p.value.clone(), p.trainable))
                .collect(),
            adam_step: opt.step_count(),
            moments: opt.moments().clone(),
        }
    }

    /// Copies parameter values and trainable flags into `store`, which must
    /// declare exactly the same names and shapes.
    pub fn restore_params(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, value, trainable) in &self.params {
            if !store.contains(name) {
                return Err(Error::Checkpoint(format!("model has no parameter {name}")));
            }
            store
                .set(name, value.clone())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            store.set_trainable(name, *trainable)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors: Vec<TensorEntry> = self
            .params
            .iter()
            .map(|(n, t, tr)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
                trainable: *tr,
                moments: self.moments.contains_key(n),
            })
            .collect();
        let header = Header {
            iteration: self.iteration,
            model: self.model.clone(),
            train: self.train.clone(),
            categories: self.categories.clone(),
            history: self.history.clone(),
            adam_step: self.adam_step,
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |v: &[f64]| {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        for (name, t, _) in &self.params {
            put(t.data());
            if let Some(m) = self.moments.get(name) {
                put(&m.m);
                put(&m.v);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated header"))?;
        let json = body.get(..hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let mut blob = &body[hlen..];
        let mut take = |n: usize| -> Result<Vec<f64>> {
            if blob.len() < n * 8 {
                return Err(bad("truncated tensor data"));
            }
            let (head, rest) = blob.split_at(n * 8);
            blob = rest;
            Ok(head
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let mut params = Vec::with_capacity(header.tensors.len());
        let mut moments = IndexMap::new();
        for e in &header.tensors {
            let n = e.shape.iter().product();
            params.push((e.name.clone(), Tensor::new(&e.shape, take(n)?)?, e.trainable));
            if e.moments {
                let m = take(n)?;
                let v = take(n)?;
                moments.insert(e.name.clone(), Moments { m, v });
            }
        }
        if !blob.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self {
            iteration: header.iteration,
            model: header.model,
            train: header.train,
            categories: header.categories,
            history: header.history,
            params,
            adam_step: header.adam_step,
            moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
            std::fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
