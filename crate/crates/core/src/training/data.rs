//! Pre-tokenized training streams and deterministic batching.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{document_words, Document};
use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::model::{split_long_word, Arch, Batch, FlatBatch, SegmentedBatch};
use crate::tokenizer::Tokenizer;

/// A tokenized split ready for batching.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Stream {
    /// Token stream of a flat model: cleaned words joined by the separator,
    /// documents joined by the separator too (the word scheme has none).
    Flat(Vec<u32>),
    /// Unit ids per word for a hierarchical model, long words already split.
    Words(Vec<Vec<u32>>),
}

impl Stream {
    pub fn len(&self) -> usize {
        match self {
            Stream::Flat(t) => t.len(),
            Stream::Words(w) => w.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Tokenizes `docs` for the given architecture. Documents are tokenized
/// independently (in parallel when `exec` allows) and merged in order.
pub fn tokenize_docs(docs: &[Document], tok: &Tokenizer, arch: Arch, max_word_len: usize, exec: Exec) -> Stream {
    match arch {
        Arch::Flat => {
            let parts = exec::map(exec, docs, |d| {
                let words = document_words(d);
                if words.is_empty() {
                    Vec::new()
                } else {
                    tok.encode(&words.joined()).ids
                }
            });
            let sep = tok.separator();
            let mut out = Vec::new();
            for p in parts.into_iter().filter(|p| !p.is_empty()) {
                if !out.is_empty() {
                    out.extend(sep);
                }
                out.extend(p);
            }
            Stream::Flat(out)
        }
        Arch::Hierarchical => {
            let parts = exec::map(exec, docs, |d| {
                document_words(d)
                    .words
                    .iter()
                    .flat_map(|w| split_long_word(&tok.encode_word(w), max_word_len))
                    .collect::<Vec<_>>()
            });
            Stream::Words(parts.into_iter().flatten().collect())
        }
    }
}

/// Fixed-budget sequences of a stream, in corpus order. Flat sequences hold
/// exactly `budget` tokens; hierarchical ones greedily take whole words while
/// the units plus one separator per word fit in `budget`. A trailing partial
/// sequence is dropped.
pub fn make_sequences(stream: &Stream, budget: usize) -> Result<Vec<Sequence>> {
    if budget == 0 {
        return Err(Error::config("sequence budget must be positive"));
    }
    let seqs: Vec<Sequence> = match stream {
        Stream::Flat(tokens) => tokens.chunks_exact(budget).map(|c| Sequence::Flat(c.to_vec())).collect(),
        Stream::Words(words) => {
            let mut out = Vec::new();
            let mut cur: Vec<Vec<u32>> = Vec::new();
            let mut used = 0;
            for w in words {
                let cost = w.len() + 1;
                if cost > budget {
                    return Err(Error::config(format!("a word of {} units does not fit a budget of {budget}", w.len())));
                }
                if used + cost > budget {
                    out.push(Sequence::Words(std::mem::take(&mut cur)));
                    used = 0;
                }
                cur.push(w.clone());
                used += cost;
            }
            out
        }
    };
    if seqs.is_empty() {
        let available = match stream {
            Stream::Flat(t) => t.len(),
            Stream::Words(w) => w.iter().map(|w| w.len() + 1).sum(),
        };
        return Err(Error::CorpusTooShort { available, block: budget });
    }
    Ok(seqs)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Sequence {
    Flat(Vec<u32>),
    Words(Vec<Vec<u32>>),
}

/// Generator of the batch order for `epoch`: a ChaCha8 stream keyed by the
/// run seed, one stream per epoch.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Shuffles sequences with [`epoch_rng`] and groups them into batches of
/// `batch_size` (the final batch may be smaller).
pub fn make_batches(seqs: &[Sequence], batch_size: usize, n_cls: usize, max_word_len: usize, seed: u64, epoch: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.shuffle(&mut epoch_rng(seed, epoch));
    order
        .chunks(batch_size)
        .map(|idx| batch_of(idx.iter().map(|&i| &seqs[i]), n_cls, max_word_len))
        .collect()
}

/// Batch of sequences in the given order.
pub fn batch_of<'a>(seqs: impl Iterator<Item = &'a Sequence>, n_cls: usize, max_word_len: usize) -> Result<Batch> {
    let seqs: Vec<&Sequence> = seqs.collect();
    match seqs.first() {
        None => Err(Error::config("empty batch")),
        Some(Sequence::Flat(_)) => {
            let blocks = seqs
                .iter()
                .map(|s| match s {
                    Sequence::Flat(t) => Ok(t.clone()),
                    Sequence::Words(_) => Err(Error::config("mixed sequence kinds")),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Batch::Flat(FlatBatch::from_blocks(&blocks)))
        }
        Some(Sequence::Words(_)) => {
            let words = seqs
                .iter()
                .map(|s| match s {
                    Sequence::Words(w) => Ok(w.clone()),
                    Sequence::Flat(_) => Err(Error::config("mixed sequence kinds")),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Batch::Hier(SegmentedBatch::new(&words, n_cls, max_word_len)?))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{Scheme, TokenizerOptions};

    fn doc(text: &str) -> Document {
        Document::new("d", text).unwrap()
    }

    #[test]
    fn char_budget_gives_floor_division() {
        let text: String = (0..200).map(|i| if i % 5 == 4 { ' ' } else { 'a' }).collect::<String>().repeat(5);
        let docs = vec![doc(text.trim_end())];
        let tok = Tokenizer::train(Scheme::Char, &docs, TokenizerOptions::default()).unwrap();
        let stream = tokenize_docs(&docs, &tok, Arch::Flat, 24, Exec::Sequential);
        assert_eq!(stream.len(), 999);
        let docs = vec![doc(&format!("{}a", text.trim_end()))];
        let stream = tokenize_docs(&docs, &tok, Arch::Flat, 24, Exec::Sequential);
        assert_eq!(stream.len(), 1000);
        assert_eq!(make_sequences(&stream, 192).unwrap().len(), 5);
    }

    #[test]
    fn too_short_is_an_error() {
        let stream = Stream::Flat(vec![7; 10]);
        assert!(matches!(make_sequences(&stream, 192), Err(Error::CorpusTooShort { .. })));
    }

    #[test]
    fn word_packing_respects_budget() {
        let words: Vec<Vec<u32>> = (0..50).map(|i| vec![10; 1 + i % 7]).collect();
        let seqs = make_sequences(&Stream::Words(words), 20).unwrap();
        for s in &seqs {
            let Sequence::Words(w) = s else { panic!() };
            assert!(w.iter().map(|w| w.len() + 1).sum::<usize>() <= 20);
        }
    }

    #[test]
    fn batches_are_deterministic() {
        let seqs: Vec<Sequence> = (0..9).map(|i| Sequence::Flat(vec![10 + i; 4])).collect();
        let a = make_batches(&seqs, 2, 1, 24, 7, 3).unwrap();
        let b = make_batches(&seqs, 2, 1, 24, 7, 3).unwrap();
        let c = make_batches(&seqs, 2, 1, 24, 7, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 5);
    }
}
