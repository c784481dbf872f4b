//! Byte-pair-encoding subword model trained on word-segmented text.
//!
//! Training counts adjacent symbol pairs inside words (weighted by word
//! frequency), merges the most frequent pair, and repeats. Ties go to the
//! lexicographically smallest `(left, right)` string pair. Pairs never span
//! a word boundary.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use crate::error::{Error, Result};

use super::vocab::{Vocab, UNK};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    vocab: Vocab,
    /// (left id, right id) -> ascending ranks at which the pair was merged.
    /// A pair can be merged twice when an equal-string token re-forms it.
    ranks: HashMap<(u32, u32), Vec<usize>>,
}

/// Outcome of a training run; `reached_target` is false when the corpus ran
/// out of pairs before the requested vocabulary size.
#[derive(Clone, Debug)]
pub struct BpeTraining {
    pub model: BpeModel,
    pub requested_size: usize,
    pub reached_target: bool,
}

impl BpeModel {
    /// A model with no merges over the given base vocabulary.
    pub fn from_base(vocab: Vocab) -> Self {
        BpeModel {
            merges: Vec::new(),
            vocab,
            ranks: HashMap::new(),
        }
    }

    pub fn from_parts(base: Vocab, merges: Vec<(String, String)>) -> Result<Self> {
        let mut model = BpeModel::from_base(base);
        for (left, right) in merges {
            model.add_merge(&left, &right)?;
        }
        Ok(model)
    }

    fn add_merge(&mut self, left: &str, right: &str) -> Result<u32> {
        let (Some(l), Some(r)) = (self.vocab.id(left), self.vocab.id(right)) else {
            return Err(Error::config(format!(
                "merge ({left:?}, {right:?}) references unknown tokens"
            )));
        };
        let merged = self.vocab.push(&format!("{left}{right}"));
        let rank = self.merges.len();
        self.ranks.entry((l, r)).or_default().push(rank);
        self.merges.push((left.to_string(), right.to_string()));
        Ok(merged)
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Segments one word (no separators) by replaying the merges in training
    /// order. Characters outside the base vocabulary become UNK.
    pub fn encode_word(&self, word: &str) -> Vec<u32> {
        let mut symbols: Vec<u32> = word
            .chars()
            .map(|c| {
                let mut buf = [0u8; 4];
                self.vocab.id_or_unk(c.encode_utf8(&mut buf))
            })
            .collect();
        // Sequential replay: the next merge to apply is the lowest-ranked pair
        // present whose rank is not below the last applied rank.
        let mut floor = 0usize;
        loop {
            let mut best: Option<(usize, u32, u32)> = None;
            for w in symbols.windows(2) {
                let Some(ranks) = self.ranks.get(&(w[0], w[1])) else {
                    continue;
                };
                if let Some(&rank) = ranks.iter().find(|&&r| r >= floor) {
                    if best.is_none_or(|b| rank < b.0) {
                        best = Some((rank, w[0], w[1]));
                    }
                }
            }
            let Some((rank, l, r)) = best else {
                break;
            };
            let (left, right) = &self.merges[rank];
            let merged = self.vocab.id(&format!("{left}{right}")).unwrap_or(UNK);
            symbols = merge_pair(&symbols, l, r, merged);
            floor = rank + 1;
        }
        symbols
    }

    pub fn save(&self, vocab_path: &Path, merges_path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.vocab.to_map())?;
        std::fs::write(vocab_path, json).map_err(|e| Error::io(vocab_path, e))?;
        let mut merges = String::new();
        for (l, r) in &self.merges {
            merges.push_str(l);
            merges.push(' ');
            merges.push_str(r);
            merges.push('\n');
        }
        std::fs::write(merges_path, merges).map_err(|e| Error::io(merges_path, e))
    }

    /// Loads the two-file format: a JSON token→id map and a merges file with
    /// one space-separated pair per line (`#version` headers are skipped).
    pub fn load(vocab_path: &Path, merges_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(vocab_path).map_err(|e| Error::io(vocab_path, e))?;
        let map: BTreeMap<String, u32> = serde_json::from_str(&text)?;
        let vocab = Vocab::from_map(&map)?;
        let text = std::fs::read_to_string(merges_path).map_err(|e| Error::io(merges_path, e))?;
        let mut model = BpeModel::from_base(vocab);
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() || line.starts_with("#version") {
                continue;
            }
            let Some((l, r)) = line.split_once(' ') else {
                return Err(Error::config(format!(
                    "merges line {} is not a pair: {line:?}",
                    n + 1
                )));
            };
            let merged = format!("{l}{r}");
            let (Some(li), Some(ri), Some(_)) =
                (model.vocab.id(l), model.vocab.id(r), model.vocab.id(&merged))
            else {
                return Err(Error::config(format!(
                    "merges line {} references tokens missing from the vocabulary",
                    n + 1
                )));
            };
            let rank = model.merges.len();
            model.ranks.entry((li, ri)).or_default().push(rank);
            model.merges.push((l.to_string(), r.to_string()));
        }
        Ok(model)
    }
}

fn merge_pair(symbols: &[u32], l: u32, r: u32, merged: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == l && symbols[i + 1] == r {
            out.push(merged);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    out
}

/// Trains merges on `word_counts` starting from `base` until the vocabulary
/// holds `target_vocab_size` tokens or no pair remains.
pub fn train_bpe(
    base: Vocab,
    word_counts: &BTreeMap<String, u64>,
    target_vocab_size: usize,
) -> Result<BpeTraining> {
    if target_vocab_size <= base.len() {
        return Err(Error::config(format!(
            "target vocabulary size {target_vocab_size} must exceed the base size {}",
            base.len()
        )));
    }
    let mut model = BpeModel::from_base(base);
    let mut words: Vec<(Vec<u32>, i64)> = word_counts
        .iter()
        .map(|(w, &c)| {
            let ids = w
                .chars()
                .map(|ch| {
                    let mut buf = [0u8; 4];
                    model.vocab.id_or_unk(ch.encode_utf8(&mut buf))
                })
                .collect();
            (ids, c as i64)
        })
        .collect();

    let mut counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut index: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (wi, (syms, c)) in words.iter().enumerate() {
        for p in syms.windows(2) {
            *counts.entry((p[0], p[1])).or_default() += c;
            index.entry((p[0], p[1])).or_default().insert(wi);
        }
    }

    while model.vocab.len() < target_vocab_size {
        let mut best: Option<((u32, u32), i64)> = None;
        for (&pair, &c) in &counts {
            if c <= 0 {
                continue;
            }
            let better = match best {
                None => true,
                Some((bp, bc)) => {
                    c > bc || (c == bc && pair_key(&model.vocab, pair) < pair_key(&model.vocab, bp))
                }
            };
            if better {
                best = Some((pair, c));
            }
        }
        let Some(((l, r), _)) = best else { break };
        let left = model.vocab.token(l).unwrap_or_default().to_string();
        let right = model.vocab.token(r).unwrap_or_default().to_string();
        let merged = model.add_merge(&left, &right)?;

        let mut affected: Vec<usize> = index.remove(&(l, r)).unwrap_or_default().into_iter().collect();
        affected.sort_unstable();
        for wi in affected {
            let (syms, c) = &mut words[wi];
            if !syms.windows(2).any(|p| p[0] == l && p[1] == r) {
                continue;
            }
            for p in syms.windows(2) {
                *counts.entry((p[0], p[1])).or_default() -= *c;
            }
            *syms = merge_pair(syms, l, r, merged);
            for p in syms.windows(2) {
                *counts.entry((p[0], p[1])).or_default() += *c;
                index.entry((p[0], p[1])).or_default().insert(wi);
            }
        }
        counts.retain(|_, c| *c > 0);
    }

    let reached_target = model.vocab.len() >= target_vocab_size;
    Ok(BpeTraining {
        model,
        requested_size: target_vocab_size,
        reached_target,
    })
}

fn pair_key(vocab: &Vocab, (l, r): (u32, u32)) -> (&str, &str) {
    (
        vocab.token(l).unwrap_or_default(),
        vocab.token(r).unwrap_or_default(),
    )
}

/// Id of the symbol a base character maps to, UNK when absent.
pub fn base_id(vocab: &Vocab, c: char) -> u32 {
    let mut buf = [0u8; 4];
    vocab.id(c.encode_utf8(&mut buf)).unwrap_or(UNK)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(chars: &str) -> Vocab {
        let mut v = Vocab::with_specials();
        let mut cs: Vec<char> = chars.chars().collect();
        cs.sort();
        cs.dedup();
        for c in cs {
            v.push(&c.to_string());
        }
        v
    }

    fn counts(text: &str) -> BTreeMap<String, u64> {
        let mut m = BTreeMap::new();
        for w in text.split_whitespace() {
            *m.entry(w.to_string()).or_default() += 1;
        }
        m
    }

    #[test]
    fn first_merge_on_abab() {
        let t = train_bpe(base("ab"), &counts("abab abab"), 8).unwrap();
        assert_eq!(t.model.merges()[0], ("a".to_string(), "b".to_string()));
    }

    #[test]
    fn single_repeated_char() {
        let t = train_bpe(base("a"), &counts("aaaa"), 8).unwrap();
        assert_eq!(t.model.merges()[0], ("a".to_string(), "a".to_string()));
        assert_eq!(t.model.merges()[1], ("aa".to_string(), "aa".to_string()));
        assert!(t.reached_target);
        assert_eq!(t.model.encode_word("aaaa").len(), 1);
    }

    #[test]
    fn stops_early_when_pairs_run_out() {
        let t = train_bpe(base("ab"), &counts("ab"), 50).unwrap();
        assert!(!t.reached_target);
        assert_eq!(t.model.vocab().len(), 8);
    }

    #[test]
    fn rejects_target_below_base() {
        assert!(train_bpe(base("abc"), &counts("abc"), 8).is_err());
    }

    #[test]
    fn encode_replays_merges_and_handles_unknowns() {
        let model = BpeModel::from_parts(base("ab"), vec![("a".into(), "b".into())]).unwrap();
        let ab = model.vocab().id("ab").unwrap();
        assert_eq!(model.encode_word("abab"), vec![ab, ab]);
        assert_eq!(model.encode_word("axb"), vec![model.vocab().id("a").unwrap(), UNK, model.vocab().id("b").unwrap()]);
        let empty = BpeModel::from_base(base("ab"));
        assert_eq!(empty.encode_word("ab").len(), 2);
    }

    #[test]
    fn save_load_roundtrip() {
        let t = train_bpe(base("abc"), &counts("abc abc cab bca abca"), 14).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (v, m) = (dir.path().join("vocab.json"), dir.path().join("merges.txt"));
        t.model.save(&v, &m).unwrap();
        let loaded = BpeModel::load(&v, &m).unwrap();
        assert_eq!(loaded.merges(), t.model.merges());
        assert_eq!(loaded.encode_word("abcabc"), t.model.encode_word("abcabc"));
    }
}
