//! Graph construction for both architectures.
//!
//! Hierarchical sequences run in three stages. The encoder sees each word
//! as `[CLS; k] ++ units ++ [EOW]` and exposes the k CLS outputs. The
//! word-level decoder sees a learned start group followed by the CLS groups
//! of all preceding words, causally at word granularity, and predicts k
//! embeddings per word. The character decoder reads those k embeddings as
//! a prefix and predicts the word's units and EOW.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::nn::{AttentionMask, AttnBlock, AttnLayout, Graph, Scalar, Tensor, Var};
use crate::tokenizer::{CLS, EOW, PAD};

use super::batch::{build_word_causal_mask, padded_causal_mask, padded_full_mask, Batch};
use super::config::Arch;
use super::params::{BlockIdx, FlatIdx, HierIdx, ParamIndex, StackIdx};
use super::Model;

fn p(i: usize) -> Var {
    Var::Param(i)
}

fn positions(n: usize) -> Vec<u32> {
    (0..n as u32).collect()
}

impl<T: Scalar> Model<T> {
    fn flat_idx(&self) -> Result<&FlatIdx> {
        match &self.index {
            ParamIndex::Flat(f) => Ok(f),
            ParamIndex::Hier(_) => Err(Error::config("operation needs a flat model")),
        }
    }

    fn hier_idx(&self) -> Result<&HierIdx> {
        match &self.index {
            ParamIndex::Hier(h) => Ok(h),
            ParamIndex::Flat(_) => Err(Error::config("operation needs a hierarchical model")),
        }
    }

    fn block(&self, g: &mut Graph<'_, T>, x: Var, b: &BlockIdx, layout: &Arc<AttnLayout>) -> Result<Var> {
        let h = g.layer_norm(x, p(b.ln1.0), p(b.ln1.1))?;
        let qkv = g.linear(h, p(b.qkv.0), Some(p(b.qkv.1)))?;
        let a = g.attention(qkv, layout.clone(), self.config.heads)?;
        let a = g.linear(a, p(b.proj.0), Some(p(b.proj.1)))?;
        let x = g.add(x, a)?;
        let h = g.layer_norm(x, p(b.ln2.0), p(b.ln2.1))?;
        let h = g.linear(h, p(b.fc.0), Some(p(b.fc.1)))?;
        let h = g.gelu(h);
        let h = g.linear(h, p(b.out.0), Some(p(b.out.1)))?;
        g.add(x, h)
    }

    fn stack(&self, g: &mut Graph<'_, T>, mut x: Var, s: &StackIdx, layout: AttnLayout) -> Result<Var> {
        let layout = Arc::new(layout);
        for b in &s.blocks {
            x = self.block(g, x, b, &layout)?;
        }
        g.layer_norm(x, p(s.ln_f.0), p(s.ln_f.1))
    }

    fn embed(&self, g: &mut Graph<'_, T>, wte: usize, ids: &[u32], wpe: usize, pos: &[u32]) -> Result<Var> {
        let tok = g.embedding(p(wte), ids)?;
        let pe = g.embedding(p(wpe), pos)?;
        g.add(tok, pe)
    }

    pub(crate) fn flat_graph(&self, g: &mut Graph<'_, T>, ids: &[u32]) -> Result<Var> {
        let f = self.flat_idx()?;
        let n = ids.len();
        if n == 0 {
            return Err(Error::Shape("empty input sequence".into()));
        }
        if n > self.config.context_tokens {
            return Err(Error::OverBudget {
                len: n,
                budget: self.config.context_tokens,
            });
        }
        let x = self.embed(g, f.wte, ids, f.wpe, &positions(n))?;
        let x = self.stack(g, x, &f.stack, AttnLayout::single(AttentionMask::causal(n)))?;
        g.linear(x, p(f.head), None)
    }

    /// CLS outputs of the encoder, `k` rows per word.
    pub(crate) fn enc_graph(&self, g: &mut Graph<'_, T>, words: &[&[u32]]) -> Result<Var> {
        let h = self.hier_idx()?;
        let c = &self.config;
        let k = c.n_cls;
        let (mut ids, mut pos, mut blocks, mut cls_rows) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for w in words {
            if w.len() > c.max_word_len {
                return Err(Error::Shape(format!(
                    "word of {} units exceeds max_word_len {}; split it first",
                    w.len(),
                    c.max_word_len
                )));
            }
            let start = ids.len();
            let used = k + w.len() + 1;
            let width = if c.packed { used } else { c.encoder_width() };
            ids.extend(std::iter::repeat_n(CLS, k));
            ids.extend_from_slice(w);
            ids.push(EOW);
            ids.resize(start + width, PAD);
            pos.extend(positions(width));
            let mask = if c.packed {
                AttentionMask::full(used)
            } else {
                padded_full_mask(width, used)
            };
            blocks.push(AttnBlock { start, mask });
            cls_rows.extend((start..start + k).map(Some));
        }
        let x = self.embed(g, h.enc_wte, &ids, h.enc_wpe, &pos)?;
        let layout = AttnLayout::new(ids.len(), blocks)?;
        let x = self.stack(g, x, &h.enc, layout)?;
        g.gather_rows(x, cls_rows)
    }

    /// Predicted CLS' rows for groups `0..=n_prev` given the CLS rows of the
    /// `n_prev` preceding words.
    pub(crate) fn core_graph(&self, g: &mut Graph<'_, T>, cls: Option<Var>, n_prev: usize) -> Result<Var> {
        let h = self.hier_idx()?;
        let k = self.config.n_cls;
        let groups = n_prev + 1;
        if groups > self.config.max_words() {
            return Err(Error::OverBudget {
                len: groups,
                budget: self.config.max_words(),
            });
        }
        let x = match cls {
            Some(c) => g.concat_rows(&[p(h.start), c])?,
            None => p(h.start),
        };
        if g.value(x).rows() != groups * k {
            return Err(Error::Shape(format!(
                "word-level decoder got {} rows for {groups} groups",
                g.value(x).rows()
            )));
        }
        let pos: Vec<u32> = (0..groups as u32).flat_map(|gi| std::iter::repeat_n(gi, k)).collect();
        let pe = g.embedding(p(h.core_wpe), &pos)?;
        let x = g.add(x, pe)?;
        let layout = AttnLayout::single(build_word_causal_mask(groups, k)?);
        self.stack(g, x, &h.core, layout)
    }

    /// Next-unit logits for every word, `len + 1` rows per word in order:
    /// row `j` predicts unit `j`, the last row predicts EOW.
    pub(crate) fn dec_graph(&self, g: &mut Graph<'_, T>, clsp: Var, words: &[&[u32]]) -> Result<Var> {
        let h = self.hier_idx()?;
        let c = &self.config;
        let k = c.n_cls;
        let n = words.len();
        let chars: Vec<u32> = words.iter().flat_map(|w| w.iter().copied()).collect();
        let base = if chars.is_empty() {
            clsp
        } else {
            let ce = g.embedding(p(h.dec_wte), &chars)?;
            g.concat_rows(&[clsp, ce])?
        };
        let (mut idx, mut pos, mut blocks, mut pred_rows) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut off = n * k;
        for (i, w) in words.iter().enumerate() {
            if w.len() > c.max_word_len {
                return Err(Error::Shape(format!(
                    "word of {} units exceeds max_word_len {}",
                    w.len(),
                    c.max_word_len
                )));
            }
            let start = idx.len();
            let used = k + w.len();
            let width = if c.packed { used } else { c.decoder_width() };
            idx.extend((i * k..(i + 1) * k).map(Some));
            idx.extend((off..off + w.len()).map(Some));
            idx.resize(start + width, None);
            off += w.len();
            pos.extend(positions(width));
            let mask = if c.packed {
                AttentionMask::causal(used)
            } else {
                padded_causal_mask(width, used)
            };
            blocks.push(AttnBlock { start, mask });
            pred_rows.extend((start + k - 1..start + used).map(Some));
        }
        let x = g.gather_rows(base, idx)?;
        let pe = g.embedding(p(h.dec_wpe), &pos)?;
        let x = g.add(x, pe)?;
        let rows = g.value(x).rows();
        let x = self.stack(g, x, &h.dec, AttnLayout::new(rows, blocks)?)?;
        let x = g.gather_rows(x, pred_rows)?;
        g.linear(x, p(h.head), None)
    }

    /// Teacher-forced logits for a sequence of words.
    pub(crate) fn hier_graph(&self, g: &mut Graph<'_, T>, words: &[&[u32]]) -> Result<Var> {
        let n = words.len();
        if n == 0 {
            return Err(Error::Shape("empty word sequence".into()));
        }
        // The last word's CLS is never consumed, so it is not encoded.
        let cls = if n > 1 {
            Some(self.enc_graph(g, &words[..n - 1])?)
        } else {
            None
        };
        let clsp = self.core_graph(g, cls, n - 1)?;
        self.dec_graph(g, clsp, words)
    }

    fn example_loss(&self, g: &mut Graph<'_, T>, batch: &Batch, i: usize, denom: usize) -> Result<Var> {
        match batch {
            Batch::Flat(b) => {
                if b.inputs[i].len() != b.targets[i].len() {
                    return Err(Error::Shape("flat input and target lengths differ".into()));
                }
                let logits = self.flat_graph(g, &b.inputs[i])?;
                let targets: Vec<Option<u32>> = b.targets[i].iter().map(|&t| Some(t)).collect();
                g.cross_entropy(logits, &targets, denom)
            }
            Batch::Hier(b) => {
                let words = b.words(i);
                let logits = self.hier_graph(g, &words)?;
                let targets: Vec<Option<u32>> = words
                    .iter()
                    .flat_map(|w| w.iter().copied().chain([EOW]))
                    .map(Some)
                    .collect();
                g.cross_entropy(logits, &targets, denom)
            }
        }
    }

    fn check_batch_arch(&self, batch: &Batch) -> Result<()> {
        match (batch, self.config.arch) {
            (Batch::Flat(_), Arch::Flat) | (Batch::Hier(_), Arch::Hierarchical) => Ok(()),
            _ => Err(Error::config(format!(
                "batch layout does not match the {} model",
                self.config.arch
            ))),
        }
    }

    /// Records the mean per-token loss of the whole batch on `g`. The graph's
    /// parameters must follow this model's layout; gradient checks pass
    /// perturbed copies.
    pub fn loss_graph(&self, g: &mut Graph<'_, T>, batch: &Batch) -> Result<Var> {
        self.check_batch_arch(batch)?;
        let denom = batch.target_count();
        let mut total: Option<Var> = None;
        for i in 0..batch.len() {
            let l = self.example_loss(g, batch, i, denom)?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        total.ok_or_else(|| Error::config("empty batch"))
    }

    /// Mean per-token loss of a batch.
    pub fn batch_loss(&self, batch: &Batch, exec: Exec) -> Result<f64> {
        self.check_batch_arch(batch)?;
        let denom = batch.target_count();
        let losses = exec::map_range(exec, batch.len(), |i| {
            let mut g = Graph::new(&self.params);
            let loss = self.example_loss(&mut g, batch, i, denom)?;
            g.check_finite()?;
            Ok::<_, Error>(g.value(loss).data()[0].as_f64())
        });
        losses.into_iter().sum()
    }

    /// Mean per-token loss and its gradient w.r.t. every parameter. Each
    /// sequence is differentiated independently and the results are summed
    /// in sequence order, so the outcome does not depend on `exec`.
    pub fn batch_gradients(&self, batch: &Batch, exec: Exec) -> Result<(f64, Vec<Vec<T>>)> {
        self.check_batch_arch(batch)?;
        let denom = batch.target_count();
        let per_seq = exec::map_range(exec, batch.len(), |i| {
            let mut g = Graph::new(&self.params);
            let loss = self.example_loss(&mut g, batch, i, denom)?;
            let grads = g.backward(loss)?;
            Ok::<_, Error>((g.value(loss).data()[0].as_f64(), grads.params))
        });
        let mut total = 0.0;
        let mut sum: Vec<Vec<T>> = self.params.iter().map(|t| vec![T::zero(); t.len()]).collect();
        for r in per_seq {
            let (loss, grads) = r?;
            total += loss;
            for (acc, g) in sum.iter_mut().zip(grads) {
                if let Some(g) = g {
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += v;
                    }
                }
            }
        }
        Ok((total, sum))
    }

    /// Causal decoder logits `[len, V]`; row `t` predicts token `t + 1`.
    pub fn flat_forward(&self, ids: &[u32]) -> Result<Tensor<T>> {
        let mut g = Graph::new(&self.params);
        let out = self.flat_graph(&mut g, ids)?;
        g.check_finite()?;
        Ok(g.value(out).clone())
    }

    /// Encoder CLS outputs, `[batch, max_words, n_cls, D]`; rows of unused
    /// words are zero.
    pub fn encode_words(&self, batch: &super::SegmentedBatch) -> Result<Tensor<T>> {
        let (k, d) = (self.config.n_cls, self.config.dim);
        if batch.n_cls() != k || batch.max_word_len() > self.config.max_word_len {
            return Err(Error::Shape("batch layout does not match the model".into()));
        }
        let mw = batch.max_words();
        let mut out = Tensor::zeros(&[batch.batch_size(), mw, k, d]);
        for b in 0..batch.batch_size() {
            let words = batch.words(b);
            if words.is_empty() {
                continue;
            }
            let mut g = Graph::new(&self.params);
            let cls = self.enc_graph(&mut g, &words)?;
            g.check_finite()?;
            let v = g.value(cls).data();
            out.data_mut()[b * mw * k * d..][..v.len()].copy_from_slice(v);
        }
        Ok(out)
    }

    /// CLS outputs of a single word, `[n_cls, D]`.
    pub fn encode_word(&self, word: &[u32]) -> Result<Tensor<T>> {
        let mut g = Graph::new(&self.params);
        let cls = self.enc_graph(&mut g, &[word])?;
        g.check_finite()?;
        g.value(cls).clone().reshape(vec![self.config.n_cls, self.config.dim])
    }

    /// Word-level decoder over `[n, n_cls, D]` word representations:
    /// output group `i` is the prediction for word `i` from words `< i`.
    pub fn word_lm_step(&self, reps: &Tensor<T>) -> Result<Tensor<T>> {
        let (k, d) = (self.config.n_cls, self.config.dim);
        if reps.shape().len() != 3 || reps.shape()[1] != k || reps.shape()[2] != d || reps.shape()[0] == 0 {
            return Err(Error::Shape(format!("word reps of shape {:?}", reps.shape())));
        }
        let n = reps.shape()[0];
        let prev = Tensor::new(vec![(n - 1) * k, d], reps.data()[..(n - 1) * k * d].to_vec())?;
        let out = self.predict_groups(&prev, n - 1)?;
        out.reshape(vec![n, k, d])
    }

    /// Prediction for the word following `history` (`[n_prev * n_cls, D]`
    /// stacked CLS rows), `[n_cls, D]`.
    pub fn predict_next(&self, history: &Tensor<T>) -> Result<Tensor<T>> {
        let (k, d) = (self.config.n_cls, self.config.dim);
        let n_prev = history.rows() / k;
        let all = self.predict_groups(history, n_prev)?;
        Tensor::new(vec![k, d], all.data()[n_prev * k * d..].to_vec())
    }

    fn predict_groups(&self, prev: &Tensor<T>, n_prev: usize) -> Result<Tensor<T>> {
        let mut g = Graph::new(&self.params);
        let cls = if n_prev > 0 { Some(g.input(prev.clone())) } else { None };
        let out = self.core_graph(&mut g, cls, n_prev)?;
        g.check_finite()?;
        Ok(g.value(out).clone())
    }

    /// Next-unit logits `[V]` for a word whose predicted CLS' rows are
    /// `cls_pred` (`[n_cls, D]`) and whose decoded prefix is `prefix`.
    pub fn decode_word(&self, cls_pred: &Tensor<T>, prefix: &[u32]) -> Result<Vec<T>> {
        let (k, d) = (self.config.n_cls, self.config.dim);
        if cls_pred.len() != k * d {
            return Err(Error::Shape(format!("CLS' of shape {:?}", cls_pred.shape())));
        }
        let mut g = Graph::new(&self.params);
        let clsp = g.input(cls_pred.clone().reshape(vec![k, d])?);
        let logits = self.dec_graph(&mut g, clsp, &[prefix])?;
        g.check_finite()?;
        let v = g.value(logits);
        Ok(v.row(v.rows() - 1).to_vec())
    }

    /// Teacher-forced logits per word, `[len + 1, V]` each.
    pub fn word_logits(&self, words: &[&[u32]]) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new(&self.params);
        let logits = self.hier_graph(&mut g, words)?;
        g.check_finite()?;
        let all = g.value(logits);
        let v = all.cols();
        let mut row = 0;
        words
            .iter()
            .map(|w| {
                let n = w.len() + 1;
                let t = Tensor::new(vec![n, v], all.data()[row * v..(row + n) * v].to_vec());
                row += n;
                t
            })
            .collect()
    }
}
