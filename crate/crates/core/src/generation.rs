//! Greedy generation for flat and hierarchical models, with forward-pass
//! accounting.
//!
//! Hierarchical generation alternates three stages per word: encode the
//! finished words, predict the next word's CLS' rows, then decode units until
//! the end-of-word token. Each stage only ever sees a single word (encoder and
//! word decoder) or whole-word summaries (core), so no attention crosses a word
//! boundary below the word level.

use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use crate::corpus::{clean_text, segment_words};
use crate::error::{Error, Result};
use crate::model::{split_long_word, Arch, Model};
use crate::nn::{Scalar, Tensor};
use crate::tokenizer::{is_special, Tokenizer, BOS, EOW, UNK};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenMode {
    #[default]
    Sequential,
    /// Word-level predictor and word decoder run on separate threads joined
    /// by channels. Output is identical to sequential mode.
    Pipelined,
}

/// Forward-pass counts gathered while generating.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenAudit {
    pub arch: Option<Arch>,
    pub mode: GenMode,
    /// Full passes of a flat model (one per generated token).
    pub flat_passes: usize,
    /// Single-word encoder passes (prompt words plus generated words that a
    /// later prediction needed).
    pub encoder_passes: usize,
    /// Word-level predictor passes, one per generated word.
    pub core_passes: usize,
    /// Units emitted by the word decoder, end-of-word excluded.
    pub decoder_token_steps: usize,
    /// Word decoder passes per generated word, including the pass that
    /// produced the end-of-word token.
    pub decoder_passes: Vec<usize>,
    /// Units per generated word.
    pub word_lens: Vec<usize>,
}

impl GenAudit {
    pub fn total_decoder_passes(&self) -> usize {
        self.decoder_passes.iter().sum()
    }

    /// Characters generated, counting one boundary per word for hierarchical
    /// output (the end-of-word pass stands in for the space a flat model has
    /// to emit).
    pub fn units_generated(&self) -> usize {
        match self.arch {
            Some(Arch::Hierarchical) => self.word_lens.iter().map(|l| l + 1).sum(),
            _ => self.flat_passes,
        }
    }
}

/// Per-pass layer counts used to turn an audit into a sequential depth,
/// measured in layer evaluations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthModel {
    pub flat_layers: usize,
    pub encoder_layers: usize,
    pub core_layers: usize,
    pub decoder_layers: usize,
}

impl DepthModel {
    /// A flat stack of `layers` and a hierarchical model whose encoder and
    /// word decoder are a quarter as deep.
    pub fn quarter(layers: usize) -> Self {
        DepthModel {
            flat_layers: layers,
            encoder_layers: (layers / 4).max(1),
            core_layers: layers,
            decoder_layers: (layers / 4).max(1),
        }
    }

    pub fn of<T: Scalar>(model: &Model<T>) -> Self {
        let c = model.config();
        DepthModel {
            flat_layers: c.base_layers,
            encoder_layers: c.encoder_layers,
            core_layers: c.base_layers,
            decoder_layers: c.worddec_layers,
        }
    }

    /// Depth of the run recorded in `audit`. Flat runs cost one full pass per
    /// token. Sequential hierarchical runs pay every stage in turn. Pipelined
    /// runs treat the word-level stage (encoder plus core) and the word decoder
    /// as decoupled producer and consumer: after one word of fill latency the
    /// slower stage bounds throughput.
    pub fn depth(&self, audit: &GenAudit) -> usize {
        match audit.arch {
            Some(Arch::Hierarchical) => {
                let n = audit.decoder_passes.len();
                let word_stage = (self.encoder_layers + self.core_layers) * n;
                let dec_stage = audit.total_decoder_passes() * self.decoder_layers;
                match audit.mode {
                    GenMode::Sequential => word_stage + dec_stage,
                    GenMode::Pipelined => {
                        let fill = if n > 0 { self.encoder_layers + self.core_layers } else { 0 };
                        fill + word_stage.max(dec_stage)
                    }
                }
            }
            _ => audit.flat_passes * self.flat_layers,
        }
    }

    /// Depth a flat model of `flat_layers` needs to emit the same number of
    /// units.
    pub fn flat_equivalent(&self, audit: &GenAudit) -> usize {
        audit.units_generated() * self.flat_layers
    }
}

/// Result of one generation call.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    /// Decoded continuation (prompt excluded).
    pub text: String,
    /// Flat models: generated token ids. Hierarchical: units of each
    /// generated word, concatenated with EOW after each word.
    pub ids: Vec<u32>,
    pub audit: GenAudit,
}

/// Counts recorded by `generate_*`; exposed under the name used by callers
/// that only want the audit.
pub fn step_count_audit(generation: &Generation) -> &GenAudit {
    &generation.audit
}

/// Index of the largest logit, lowest id on ties.
pub fn argmax<T: Scalar>(logits: &[T]) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

fn check_scheme<T: Scalar>(model: &Model<T>, tok: &Tokenizer, arch: Arch) -> Result<()> {
    let c = model.config();
    if c.arch != arch {
        return Err(Error::config(format!("expected a {arch} model, got {}", c.arch)));
    }
    if c.scheme != tok.scheme() {
        return Err(Error::SchemeMismatch {
            checkpoint: c.scheme.to_string(),
            requested: tok.scheme().to_string(),
        });
    }
    if c.vocab_size != tok.vocab_size() {
        return Err(Error::config(format!(
            "model vocabulary {} does not match tokenizer vocabulary {}",
            c.vocab_size,
            tok.vocab_size()
        )));
    }
    Ok(())
}

/// Greedy continuation of `prompt` by `max_new` tokens. The context is
/// `[BOS]` followed by the most recent tokens that fit the budget, so long
/// prompts and long generations slide the window.
pub fn generate_flat<T: Scalar>(model: &Model<T>, tok: &Tokenizer, prompt: &str, max_new: usize) -> Result<Generation> {
    flat_loop(model, tok, prompt, max_new, |_| false)
}

/// Greedy flat continuation that stops once `words` complete words have
/// been generated: after the `words`-th separator that follows a word, or
/// after `words` tokens for the word scheme. A word is capped at
/// `max_word_len` tokens' worth of steps.
pub fn generate_flat_words<T: Scalar>(model: &Model<T>, tok: &Tokenizer, prompt: &str, words: usize) -> Result<Generation> {
    let Some(sep) = tok.separator() else {
        return flat_loop(model, tok, prompt, words, |_| false);
    };
    let cap = words * (model.config().max_word_len + 1);
    let (mut done, mut in_word) = (0, false);
    let mut g = flat_loop(model, tok, prompt, cap, |id| {
        if id == sep {
            done += usize::from(in_word);
            in_word = false;
        } else {
            in_word = true;
        }
        done == words
    })?;
    if g.ids.last() == Some(&sep) {
        g.ids.pop();
        g.text = tok.decode(&g.ids);
    }
    Ok(g)
}

fn flat_loop<T: Scalar>(
    model: &Model<T>,
    tok: &Tokenizer,
    prompt: &str,
    max_new: usize,
    mut stop: impl FnMut(u32) -> bool,
) -> Result<Generation> {
    check_scheme(model, tok, Arch::Flat)?;
    let budget = model.config().context_tokens;
    let words = segment_words(&clean_text(prompt));
    let mut ids = if words.is_empty() { Vec::new() } else { tok.encode(&words.joined()).ids };
    let prompt_len = ids.len();
    let mut audit = GenAudit {
        arch: Some(Arch::Flat),
        ..GenAudit::default()
    };
    for _ in 0..max_new {
        let start = ids.len().saturating_sub(budget - 1);
        let mut ctx = Vec::with_capacity(budget);
        ctx.push(BOS);
        ctx.extend_from_slice(&ids[start..]);
        let logits = model.flat_forward(&ctx)?;
        audit.flat_passes += 1;
        let next = argmax(logits.row(logits.rows() - 1));
        ids.push(next);
        if stop(next) {
            break;
        }
    }
    let new = ids.split_off(prompt_len);
    let text = tok.decode(&new);
    Ok(Generation { text, ids: new, audit })
}

/// Word-level state shared by both hierarchical modes: cached single-word
/// encodings and the history window fed to the predictor.
struct WordState<'m, T: Scalar> {
    model: &'m Model<T>,
    lens: Vec<usize>,
    reps: Vec<Tensor<T>>,
}

impl<'m, T: Scalar> WordState<'m, T> {
    fn new(model: &'m Model<T>) -> Self {
        WordState {
            model,
            lens: Vec::new(),
            reps: Vec::new(),
        }
    }

    fn push(&mut self, word: &[u32], audit: &mut GenAudit) -> Result<()> {
        self.reps.push(self.model.encode_word(word)?);
        self.lens.push(word.len());
        audit.encoder_passes += 1;
        Ok(())
    }

    /// CLS' rows for the next word, conditioned on the most recent words
    /// whose units and boundaries fit the training block (leaving room for a
    /// one-unit next word) and whose count fits the position table.
    fn predict(&self, audit: &mut GenAudit) -> Result<Tensor<T>> {
        let c = self.model.config();
        let (k, d) = (c.n_cls, c.dim);
        let mut used = 2;
        let mut first = self.lens.len();
        while first > 0 && self.lens.len() - first < c.max_words() - 1 && used + self.lens[first - 1] < c.block_chars {
            used += self.lens[first - 1] + 1;
            first -= 1;
        }
        let mut data = Vec::with_capacity((self.lens.len() - first) * k * d);
        for r in &self.reps[first..] {
            data.extend_from_slice(r.data());
        }
        let history = Tensor::new(vec![data.len() / d, d], data)?;
        audit.core_passes += 1;
        self.model.predict_next(&history)
    }
}

/// Greedily decodes one word from its CLS' rows. Stops at EOW, at any
/// special token other than UNK (a degenerate model could emit PAD, CLS or
/// BOS), or when the word reaches `max_word_len` units.
fn decode_one<T: Scalar>(model: &Model<T>, cls: &Tensor<T>, audit: &mut GenAudit) -> Result<Vec<u32>> {
    let mwl = model.config().max_word_len;
    let mut word = Vec::new();
    let mut passes = 0;
    while word.len() < mwl {
        let next = argmax(&model.decode_word(cls, &word)?);
        passes += 1;
        if next == EOW || (is_special(next) && next != UNK) {
            break;
        }
        word.push(next);
    }
    audit.decoder_token_steps += word.len();
    audit.decoder_passes.push(passes);
    audit.word_lens.push(word.len());
    Ok(word)
}

fn prompt_words<T: Scalar>(model: &Model<T>, tok: &Tokenizer, prompt: &str) -> Vec<Vec<u32>> {
    let mwl = model.config().max_word_len;
    segment_words(&clean_text(prompt))
        .words
        .iter()
        .flat_map(|w| split_long_word(&tok.encode_word(w), mwl))
        .collect()
}

fn render(tok: &Tokenizer, words: &[Vec<u32>]) -> (String, Vec<u32>) {
    let mut ids = Vec::new();
    let parts: Vec<String> = words
        .iter()
        .map(|w| {
            ids.extend_from_slice(w);
            ids.push(EOW);
            tok.decode(w)
        })
        .collect();
    (parts.join(" "), ids)
}

/// Greedy continuation of `prompt` by `max_new_words` words. Generated words
/// are joined by single spaces; an empty word therefore shows up as two
/// consecutive spaces.
pub fn generate_hierarchical<T: Scalar>(
    model: &Model<T>,
    tok: &Tokenizer,
    prompt: &str,
    max_new_words: usize,
    mode: GenMode,
) -> Result<Generation> {
    check_scheme(model, tok, Arch::Hierarchical)?;
    let prompt = prompt_words(model, tok, prompt);
    let mut audit = GenAudit {
        arch: Some(Arch::Hierarchical),
        mode,
        ..GenAudit::default()
    };
    let mut state = WordState::new(model);
    for w in &prompt {
        state.push(w, &mut audit)?;
    }
    let words = match mode {
        GenMode::Sequential => {
            let mut words = Vec::with_capacity(max_new_words);
            for i in 0..max_new_words {
                let cls = state.predict(&mut audit)?;
                let word = decode_one(model, &cls, &mut audit)?;
                if i + 1 < max_new_words {
                    state.push(&word, &mut audit)?;
                }
                words.push(word);
            }
            words
        }
        GenMode::Pipelined => pipelined(model, state, max_new_words, &mut audit)?,
    };
    let (text, ids) = render(tok, &words);
    Ok(Generation { text, ids, audit })
}

/// Producer: the word-level stage sends CLS' rows and waits for each decoded
/// word before extending its history. Consumer: the word decoder turns CLS'
/// rows into words and hands them back. Channel order keeps both stages in
/// lockstep with the sequential loop.
fn pipelined<T: Scalar>(
    model: &Model<T>,
    mut state: WordState<'_, T>,
    n: usize,
    audit: &mut GenAudit,
) -> Result<Vec<Vec<u32>>> {
    let (cls_tx, cls_rx) = mpsc::channel::<Tensor<T>>();
    let (word_tx, word_rx) = mpsc::channel::<Vec<u32>>();
    let mut producer_audit = std::mem::take(audit);
    let (produced, consumed) = std::thread::scope(|s| {
        let producer = s.spawn(move || -> Result<GenAudit> {
            for i in 0..n {
                let cls = state.predict(&mut producer_audit)?;
                if cls_tx.send(cls).is_err() {
                    break;
                }
                if i + 1 < n {
                    let Ok(word) = word_rx.recv() else { break };
                    state.push(&word, &mut producer_audit)?;
                }
            }
            Ok(producer_audit)
        });
        let consumer = s.spawn(move || -> Result<(GenAudit, Vec<Vec<u32>>)> {
            let mut dec_audit = GenAudit::default();
            let mut words = Vec::with_capacity(n);
            for i in 0..n {
                let Ok(cls) = cls_rx.recv() else { break };
                let word = decode_one(model, &cls, &mut dec_audit)?;
                if i + 1 < n && word_tx.send(word.clone()).is_err() {
                    break;
                }
                words.push(word);
            }
            Ok((dec_audit, words))
        });
        (join(producer), join(consumer))
    });
    // a failing stage closes its channels, so the other side stops early;
    // report the error from whichever stage produced one
    let produced = produced?;
    let (dec_audit, words) = consumed?;
    if words.len() != n {
        return Err(Error::config("pipelined generation ended early"));
    }
    *audit = produced;
    audit.decoder_token_steps = dec_audit.decoder_token_steps;
    audit.decoder_passes = dec_audit.decoder_passes;
    audit.word_lens = dec_audit.word_lens;
    Ok(words)
}

fn join<R>(h: std::thread::ScopedJoinHandle<'_, Result<R>>) -> Result<R> {
    h.join().unwrap_or_else(|p| std::panic::resume_unwind(p))
}
