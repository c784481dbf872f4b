use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{Scheme, NUM_SPECIALS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// Standard causal decoder over the token stream.
    #[default]
    Flat,
    /// Word encoder, word-level decoder and per-word character decoder.
    Hierarchical,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Flat => "flat",
            Arch::Hierarchical => "hierarchical",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "flat" => Ok(Arch::Flat),
            "hierarchical" | "hier" => Ok(Arch::Hierarchical),
            _ => Err(Error::config(format!("unknown architecture `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub scheme: Scheme,
    pub vocab_size: usize,
    /// Layers of the flat decoder, or of the word-level decoder.
    pub base_layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub worddec_layers: usize,
    pub n_cls: usize,
    pub max_word_len: usize,
    /// Characters of context per training sequence.
    pub block_chars: usize,
    /// Token positions of the flat decoder (the scheme's context budget).
    pub context_tokens: usize,
    /// Packed word layout instead of the padded grid. Same parameters and
    /// losses, fewer wasted rows.
    #[serde(default)]
    pub packed: bool,
}

impl ModelConfig {
    pub const DESK_LAYERS: usize = 4;
    pub const DESK_DIM: usize = 128;
    pub const DESK_HEADS: usize = 4;

    /// Desk-scale flat decoder.
    pub fn flat(scheme: Scheme, vocab_size: usize, block_chars: usize, context_tokens: usize) -> Self {
        ModelConfig {
            arch: Arch::Flat,
            scheme,
            vocab_size,
            base_layers: Self::DESK_LAYERS,
            dim: Self::DESK_DIM,
            heads: Self::DESK_HEADS,
            encoder_layers: 0,
            worddec_layers: 0,
            n_cls: 1,
            max_word_len: 24,
            block_chars,
            context_tokens,
            packed: false,
        }
    }

    /// Desk-scale hierarchical model with 2 encoder and 2 word-decoder layers
    /// and 4 CLS tokens per word.
    pub fn hierarchical(scheme: Scheme, vocab_size: usize, block_chars: usize) -> Self {
        ModelConfig {
            arch: Arch::Hierarchical,
            encoder_layers: 2,
            worddec_layers: 2,
            n_cls: 4,
            context_tokens: block_chars,
            ..Self::flat(scheme, vocab_size, block_chars, block_chars)
        }
    }

    /// Paper-scale dimensions: 8 core layers, width 512, 8 heads.
    pub fn at_paper_scale(mut self) -> Self {
        self.base_layers = 8;
        self.dim = 512;
        self.heads = 8;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.n_cls == 0 {
            return fail("n_cls must be at least 1".into());
        }
        if self.max_word_len == 0 {
            return fail("max_word_len must be at least 1".into());
        }
        if self.block_chars == 0 {
            return fail("block_chars must be positive".into());
        }
        if self.vocab_size <= NUM_SPECIALS as usize {
            return fail(format!("vocab_size {} leaves no room for regular tokens", self.vocab_size));
        }
        match self.arch {
            Arch::Flat => {
                if self.context_tokens == 0 {
                    return fail("context_tokens must be positive".into());
                }
            }
            Arch::Hierarchical => {
                if !self.scheme.is_base_unit() {
                    return fail(format!(
                        "hierarchical models need a byte or char scheme, not {}",
                        self.scheme
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.dim
    }

    /// Most words a hierarchical sequence can hold: every word costs at
    /// least one unit plus its separator.
    pub fn max_words(&self) -> usize {
        (self.block_chars / 2).max(1)
    }

    /// Rows of one padded word in the encoder: CLS prefix, units, EOW.
    pub fn encoder_width(&self) -> usize {
        self.n_cls + self.max_word_len + 1
    }

    /// Rows of one padded word in the character decoder: CLS' prefix and
    /// the teacher-forced units.
    pub fn decoder_width(&self) -> usize {
        self.n_cls + self.max_word_len
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        let mut c = ModelConfig::hierarchical(Scheme::Byte, 261, 192);
        assert!(c.validate().is_ok());
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::hierarchical(Scheme::Subword, 300, 192);
        assert!(c.validate().is_err());
        c.arch = Arch::Flat;
        assert!(c.validate().is_ok());
        assert_eq!("hierarchical".parse::<Arch>().unwrap(), Arch::Hierarchical);
        assert!("tree".parse::<Arch>().is_err());
    }
}
