use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// First and second moment estimates after `t` updates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

/// AdamW with bias-corrected moments and decoupled weight decay applied
/// only to tensors flagged in `decay`.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub state: AdamState<T>,
    decay: Vec<bool>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &[Tensor<T>], decay: Vec<bool>) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        AdamW {
            config,
            state: AdamState {
                t: 0,
                m: zeros(),
                v: zeros(),
            },
            decay,
        }
    }

    pub fn with_state(config: AdamWConfig, state: AdamState<T>, params: &[Tensor<T>], decay: Vec<bool>) -> Result<Self> {
        let fits = |s: &[Vec<T>]| s.len() == params.len() && s.iter().zip(params).all(|(a, p)| a.len() == p.len());
        if !fits(&state.m) || !fits(&state.v) || decay.len() != params.len() {
            return Err(Error::Checkpoint("optimizer state does not match the parameters".into()));
        }
        Ok(AdamW { config, state, decay })
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        let c = self.config;
        self.state.t += 1;
        let t = self.state.t as i32;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let step_size = T::of(c.lr / (1.0 - c.beta1.powi(t)));
        let bc2_sqrt = T::of((1.0 - c.beta2.powi(t)).sqrt());
        let eps = T::of(c.eps);
        let shrink = T::of(1.0 - c.lr * c.weight_decay);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.state.m[i], &mut self.state.v[i]);
            let decays = self.decay[i] && c.weight_decay != 0.0;
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                if decays {
                    *w *= shrink;
                }
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *w -= step_size * *mi / (vi.sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v *= s);
    }
    norm
}
