//! Named parameter tensors. Names, shapes and order are a pure function of
//! the model configuration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::nn::{Scalar, Tensor};

use super::config::{Arch, ModelConfig};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    /// Matrix of a linear layer: normal init, weight decay applies.
    Weight,
    /// Embedding table or learned prefix: normal init, no decay.
    Embedding,
    Bias,
    /// Layer-norm gain, initialised to one.
    Gain,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug)]
pub(crate) struct BlockIdx {
    pub ln1: (usize, usize),
    pub qkv: (usize, usize),
    pub proj: (usize, usize),
    pub ln2: (usize, usize),
    pub fc: (usize, usize),
    pub out: (usize, usize),
}

#[derive(Clone, Debug)]
pub(crate) struct StackIdx {
    pub blocks: Vec<BlockIdx>,
    pub ln_f: (usize, usize),
}

#[derive(Clone, Debug)]
pub(crate) struct FlatIdx {
    pub wte: usize,
    pub wpe: usize,
    pub stack: StackIdx,
    pub head: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct HierIdx {
    pub enc_wte: usize,
    pub enc_wpe: usize,
    pub enc: StackIdx,
    pub start: usize,
    pub core_wpe: usize,
    pub core: StackIdx,
    pub dec_wte: usize,
    pub dec_wpe: usize,
    pub dec: StackIdx,
    pub head: usize,
}

#[derive(Clone, Debug)]
pub(crate) enum ParamIndex {
    Flat(FlatIdx),
    Hier(HierIdx),
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, kind: ParamKind) -> usize {
        self.specs.push(ParamSpec { name, shape, kind });
        self.specs.len() - 1
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) -> (usize, usize) {
        let w = self.add(format!("{prefix}.w"), vec![d_in, d_out], ParamKind::Weight);
        let b = self.add(format!("{prefix}.b"), vec![d_out], ParamKind::Bias);
        (w, b)
    }

    fn norm(&mut self, prefix: &str, d: usize) -> (usize, usize) {
        let g = self.add(format!("{prefix}.g"), vec![d], ParamKind::Gain);
        let b = self.add(format!("{prefix}.b"), vec![d], ParamKind::Bias);
        (g, b)
    }

    fn stack(&mut self, prefix: &str, layers: usize, d: usize) -> StackIdx {
        let blocks = (0..layers)
            .map(|i| {
                let p = format!("{prefix}h.{i}");
                BlockIdx {
                    ln1: self.norm(&format!("{p}.ln1"), d),
                    qkv: self.linear(&format!("{p}.attn.qkv"), d, 3 * d),
                    proj: self.linear(&format!("{p}.attn.proj"), d, d),
                    ln2: self.norm(&format!("{p}.ln2"), d),
                    fc: self.linear(&format!("{p}.mlp.fc"), d, 4 * d),
                    out: self.linear(&format!("{p}.mlp.proj"), 4 * d, d),
                }
            })
            .collect();
        StackIdx {
            blocks,
            ln_f: self.norm(&format!("{prefix}ln_f"), d),
        }
    }
}

pub(crate) fn param_layout(c: &ModelConfig) -> (Vec<ParamSpec>, ParamIndex) {
    let mut b = Builder { specs: Vec::new() };
    let (d, v) = (c.dim, c.vocab_size);
    let index = match c.arch {
        Arch::Flat => {
            let wte = b.add("wte".into(), vec![v, d], ParamKind::Embedding);
            let wpe = b.add("wpe".into(), vec![c.context_tokens, d], ParamKind::Embedding);
            let stack = b.stack("", c.base_layers, d);
            let head = b.add("head.w".into(), vec![d, v], ParamKind::Weight);
            ParamIndex::Flat(FlatIdx { wte, wpe, stack, head })
        }
        Arch::Hierarchical => {
            let enc_wte = b.add("enc.wte".into(), vec![v, d], ParamKind::Embedding);
            let enc_wpe = b.add("enc.wpe".into(), vec![c.encoder_width(), d], ParamKind::Embedding);
            let enc = b.stack("enc.", c.encoder_layers, d);
            let start = b.add("core.start".into(), vec![c.n_cls, d], ParamKind::Embedding);
            let core_wpe = b.add("core.wpe".into(), vec![c.max_words(), d], ParamKind::Embedding);
            let core = b.stack("core.", c.base_layers, d);
            let dec_wte = b.add("dec.wte".into(), vec![v, d], ParamKind::Embedding);
            let dec_wpe = b.add("dec.wpe".into(), vec![c.decoder_width(), d], ParamKind::Embedding);
            let dec = b.stack("dec.", c.worddec_layers, d);
            let head = b.add("dec.head.w".into(), vec![d, v], ParamKind::Weight);
            ParamIndex::Hier(HierIdx {
                enc_wte,
                enc_wpe,
                enc,
                start,
                core_wpe,
                core,
                dec_wte,
                dec_wpe,
                dec,
                head,
            })
        }
    };
    (b.specs, index)
}

pub fn param_specs(c: &ModelConfig) -> Vec<ParamSpec> {
    param_layout(c).0
}

/// Exact parameter count: the sum of all named tensor sizes.
pub fn count_params(c: &ModelConfig) -> usize {
    param_specs(c).iter().map(ParamSpec::numel).sum()
}

pub(crate) fn init_params<T: Scalar>(specs: &[ParamSpec], seed: u64) -> Vec<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    specs
        .iter()
        .map(|s| match s.kind {
            ParamKind::Weight | ParamKind::Embedding => {
                Tensor::from_fn(&s.shape, |_| T::of(normal.sample(&mut rng)))
            }
            ParamKind::Bias => Tensor::zeros(&s.shape),
            ParamKind::Gain => Tensor::from_fn(&s.shape, |_| T::one()),
        })
        .collect()
}
