//! Checkpoint container: an 8-byte little-endian manifest length, a JSON
//! manifest (config, counters, tensor directory), then the tensor payload as
//! little-endian f32 values at the offsets given in the directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::training::AdamState;

use super::config::ModelConfig;
use super::params::param_specs;
use super::Model;

const FORMAT: &str = "wordlm-checkpoint";
const VERSION: u32 = 1;

pub type OptimizerState = AdamState<f32>;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// In [`param_specs`] order.
    pub params: Vec<Tensor<f32>>,
    pub optimizer: Option<OptimizerState>,
    pub epoch: usize,
    pub step: u64,
    /// Seed of the batch-order generator; with `epoch` and `step` it fixes
    /// every future batch.
    pub rng_state: u64,
    /// Free-form run metadata (training config, tokenizer scheme, ...).
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: ModelConfig,
    epoch: usize,
    step: u64,
    rng_state: u64,
    optimizer_t: Option<u64>,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>) -> Self {
        Checkpoint {
            config: model.config().clone(),
            params: model.params().to_vec(),
            optimizer: None,
            epoch: 0,
            step: 0,
            rng_state: 0,
            meta: serde_json::Value::Null,
        }
    }

    pub fn model(&self) -> Result<Model<f32>> {
        Model::from_params(self.config.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let specs = param_specs(&self.config);
        if specs.len() != self.params.len() {
            return Err(Error::Checkpoint("parameter list does not match the config".into()));
        }
        let mut entries = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, data: &[f32]| -> Result<()> {
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: format!("checkpoint tensor {name}") });
            }
            entries.push(Entry {
                name,
                shape,
                dtype: "f32".into(),
                offset: payload.len() as u64,
            });
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            Ok(())
        };
        for (s, t) in specs.iter().zip(&self.params) {
            push(s.name.clone(), t.shape().to_vec(), t.data())?;
        }
        if let Some(opt) = &self.optimizer {
            for (s, (m, v)) in specs.iter().zip(opt.m.iter().zip(&opt.v)) {
                push(format!("optim.m.{}", s.name), s.shape.clone(), m)?;
                push(format!("optim.v.{}", s.name), s.shape.clone(), v)?;
            }
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            rng_state: self.rng_state,
            optimizer_t: self.optimizer.as_ref().map(|o| o.t),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(8 + json.len() + payload.len());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let head = bytes.get(..8).ok_or_else(|| bad("file shorter than its header".into()))?;
        let len = u64::from_le_bytes(head.try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(8..8usize.saturating_add(len))
            .ok_or_else(|| bad("manifest length exceeds file size".into()))?;
        let manifest: Manifest = serde_json::from_slice(json)?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(bad(format!("unsupported format {} v{}", manifest.format, manifest.version)));
        }
        manifest.config.validate()?;
        let payload = &bytes[8 + len..];
        let mut expected_offset = 0u64;
        let mut tensors = std::collections::HashMap::new();
        for e in &manifest.tensors {
            if e.dtype != "f32" {
                return Err(bad(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            if e.offset != expected_offset {
                return Err(bad(format!("{}: offset {} where {expected_offset} was expected", e.name, e.offset)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let raw = payload
                .get(start..start + 4 * n)
                .ok_or_else(|| bad(format!("{}: payload truncated", e.name)))?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: format!("checkpoint tensor {}", e.name) });
            }
            expected_offset += 4 * n as u64;
            tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        }
        if expected_offset as usize != payload.len() {
            return Err(bad(format!(
                "payload holds {} bytes, directory describes {expected_offset}",
                payload.len()
            )));
        }
        let specs = param_specs(&manifest.config);
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor<f32>> {
            let t = tensors.remove(name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(bad(format!("{name}: shape {:?}, config implies {shape:?}", t.shape())));
            }
            Ok(t)
        };
        let params = specs.iter().map(|s| take(&s.name, &s.shape)).collect::<Result<Vec<_>>>()?;
        let optimizer = match manifest.optimizer_t {
            None => None,
            Some(t) => {
                let mut m = Vec::new();
                let mut v = Vec::new();
                for s in &specs {
                    m.push(take(&format!("optim.m.{}", s.name), &s.shape)?.into_data());
                    v.push(take(&format!("optim.v.{}", s.name), &s.shape)?.into_data());
                }
                Some(AdamState { t, m, v })
            }
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(bad(format!("unexpected tensor {extra}")));
        }
        Ok(Checkpoint {
            config: manifest.config,
            params,
            optimizer,
            epoch: manifest.epoch,
            step: manifest.step,
            rng_state: manifest.rng_state,
            meta: manifest.meta,
        })
    }

    /// Writes through a temporary file and a rename, so an interrupted save
    /// never replaces a valid checkpoint with a partial one.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Total stored parameter values (excluding optimizer moments).
    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }
}
