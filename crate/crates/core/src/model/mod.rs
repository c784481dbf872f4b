//! Flat and hierarchical transformer language models.

mod batch;
mod checkpoint;
mod config;
mod forward;
mod params;

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};

pub use batch::{
    build_encoder_mask, build_word_causal_mask, split_long_word, Batch, FlatBatch, SegmentedBatch,
};
pub use checkpoint::{Checkpoint, OptimizerState};
pub use config::{Arch, ModelConfig};
pub use params::{count_params, param_specs, ParamKind, ParamSpec, INIT_STD};

use params::ParamIndex;

#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    config: ModelConfig,
    specs: Vec<ParamSpec>,
    index: ParamIndex,
    params: Vec<Tensor<T>>,
}

impl<T: Scalar> Model<T> {
    /// Freshly initialised model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (specs, index) = params::param_layout(&config);
        let params = params::init_params(&specs, seed);
        Ok(Model {
            config,
            specs,
            index,
            params,
        })
    }

    /// Model with the given tensors, in [`param_specs`] order.
    pub fn from_params(config: ModelConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let (specs, index) = params::param_layout(&config);
        if specs.len() != params.len() {
            return Err(Error::Shape(format!(
                "config needs {} tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (s, p) in specs.iter().zip(&params) {
            if s.shape != p.shape() {
                return Err(Error::Shape(format!(
                    "{} has shape {:?}, expected {:?}",
                    s.name,
                    p.shape(),
                    s.shape
                )));
            }
        }
        Ok(Model {
            config,
            specs,
            index,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.specs.iter().position(|s| s.name == name).map(|i| &self.params[i])
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            specs: self.specs.clone(),
            index: self.index.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }
}
