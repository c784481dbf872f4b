//! Plain-text corpus ingestion: cleanup, word segmentation, statistics and
//! train/validation splits.
//!
//! Words are maximal runs of non-whitespace after cleanup. Cleanup detaches
//! punctuation that sits at the edge of a whitespace-delimited chunk, so
//! `"Hello, world."` becomes `"Hello , world ."` while `"don't"`, `"3.5"` and
//! `"1,000"` stay intact.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.contains('\0') {
            return Err(Error::config("document text contains a NUL character"));
        }
        Ok(Document {
            id: id.into(),
            text,
        })
    }
}

/// Words of a cleaned text together with their byte spans in that text.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WordSequence {
    pub words: Vec<String>,
    pub boundaries: Vec<(usize, usize)>,
}

impl WordSequence {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Words joined by single spaces.
    pub fn joined(&self) -> String {
        self.words.join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub size_bytes: u64,
    pub total_words: u64,
    pub unique_words: u64,
    pub total_chars: u64,
    pub chars_per_word: f64,
    pub word_freq: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<Document>,
    pub valid: Vec<Document>,
    pub seed: u64,
}

pub const DEFAULT_VALID_RATIO: f64 = 0.1;

/// Punctuation that cleanup detaches from word edges.
pub fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{00A1}' // ¡
                | '\u{00AB}' // «
                | '\u{00B7}' // ·
                | '\u{00BB}' // »
                | '\u{00BF}' // ¿
                | '\u{2010}'..='\u{2027}' // dashes, quotes, ellipsis
                | '\u{2030}'..='\u{205E}'
                | '\u{3001}'..='\u{3003}'
        )
}

/// Cleanup: strips control characters, collapses whitespace runs into a
/// single space, trims, and splits edge punctuation into standalone words.
/// Idempotent.
pub fn clean_text(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len() + raw.len() / 8);
    let filtered = raw
        .chars()
        .filter(|c| c.is_whitespace() || !c.is_control());
    let filtered: String = filtered.collect();
    for chunk in filtered.split_whitespace() {
        push_chunk(&mut out, chunk);
    }
    out
}

/// Byte-level entry point for [`clean_text`].
pub fn clean_bytes(raw: &[u8]) -> Result<String> {
    let text = String::from_utf8(raw.to_vec())?;
    Ok(clean_text(&text))
}

fn push_word(out: &mut String, word: &str) {
    if !out.is_empty() {
        out.push(' ');
    }
    out.push_str(word);
}

fn push_chunk(out: &mut String, chunk: &str) {
    let chars: Vec<(usize, char)> = chunk.char_indices().collect();
    let lead = chars.iter().take_while(|(_, c)| is_punctuation(*c)).count();
    if lead == chars.len() {
        for &(i, c) in &chars {
            push_word(out, &chunk[i..i + c.len_utf8()]);
        }
        return;
    }
    let trail = chars
        .iter()
        .rev()
        .take_while(|(_, c)| is_punctuation(*c))
        .count();
    for &(i, c) in &chars[..lead] {
        push_word(out, &chunk[i..i + c.len_utf8()]);
    }
    let core_start = chars[lead].0;
    let core_end = if trail == 0 {
        chunk.len()
    } else {
        chars[chars.len() - trail].0
    };
    push_word(out, &chunk[core_start..core_end]);
    for &(i, c) in &chars[chars.len() - trail..] {
        push_word(out, &chunk[i..i + c.len_utf8()]);
    }
}

/// Splits cleaned text on whitespace.
pub fn segment_words(text: &str) -> WordSequence {
    let mut seq = WordSequence::default();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                seq.words.push(text[s..i].to_string());
                seq.boundaries.push((s, i));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        seq.words.push(text[s..].to_string());
        seq.boundaries.push((s, text.len()));
    }
    seq
}

/// Cleans and segments a document.
pub fn document_words(doc: &Document) -> WordSequence {
    segment_words(&clean_text(&doc.text))
}

pub fn compute_stats(docs: &[Document]) -> Result<CorpusStats> {
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut word_freq: BTreeMap<String, u64> = BTreeMap::new();
    let mut total_words = 0u64;
    let mut total_chars = 0u64;
    let mut size_bytes = 0u64;
    for doc in docs {
        size_bytes += doc.text.len() as u64;
        for word in document_words(doc).words {
            total_words += 1;
            total_chars += word.chars().count() as u64;
            *word_freq.entry(word).or_default() += 1;
        }
    }
    if total_words == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(CorpusStats {
        size_bytes,
        total_words,
        unique_words: word_freq.len() as u64,
        total_chars,
        chars_per_word: total_chars as f64 / total_words as f64,
        word_freq,
    })
}

/// Partitions the vocabulary into rare (`freq < rare_max`) and frequent
/// (`freq > freq_min`) words. Words in between belong to neither set.
pub fn stratify_by_frequency(
    word_freq: &BTreeMap<String, u64>,
    rare_max: u64,
    freq_min: u64,
) -> Result<(BTreeSet<String>, BTreeSet<String>)> {
    if rare_max >= freq_min {
        return Err(Error::config(format!(
            "rare threshold {rare_max} must be below frequent threshold {freq_min}"
        )));
    }
    let mut rare = BTreeSet::new();
    let mut frequent = BTreeSet::new();
    for (word, &freq) in word_freq {
        if freq < rare_max {
            rare.insert(word.clone());
        } else if freq > freq_min {
            frequent.insert(word.clone());
        }
    }
    Ok((rare, frequent))
}

/// Seeded document-level split. Requires at least two documents so that both
/// sides are non-empty.
pub fn split_documents(docs: &[Document], valid_ratio: f64, seed: u64) -> Result<Split> {
    if docs.len() < 2 {
        return Err(Error::config(format!(
            "need at least 2 documents to split, found {}",
            docs.len()
        )));
    }
    if !(valid_ratio > 0.0 && valid_ratio < 1.0) {
        return Err(Error::config(format!(
            "validation ratio {valid_ratio} must be in (0, 1)"
        )));
    }
    let mut order: Vec<usize> = (0..docs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_valid = ((docs.len() as f64 * valid_ratio).round() as usize).clamp(1, docs.len() - 1);
    let mut valid_idx = order[..n_valid].to_vec();
    let mut train_idx = order[n_valid..].to_vec();
    // Keep corpus order inside each side.
    valid_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok(Split {
        train: train_idx.into_iter().map(|i| docs[i].clone()).collect(),
        valid: valid_idx.into_iter().map(|i| docs[i].clone()).collect(),
        seed,
    })
}

/// Parses a corpus where documents are separated by blank lines.
pub fn parse_documents(text: &str) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    let mut current = String::new();
    let flush = |current: &mut String, docs: &mut Vec<Document>| -> Result<()> {
        if !current.trim().is_empty() {
            let id = format!("doc-{:06}", docs.len());
            docs.push(Document::new(id, std::mem::take(current))?);
        }
        current.clear();
        Ok(())
    };
    for line in text.lines() {
        if line.trim().is_empty() {
            flush(&mut current, &mut docs)?;
        } else {
            if !current.is_empty() {
                current.push('\n');
            }
            current.push_str(line);
        }
    }
    flush(&mut current, &mut docs)?;
    Ok(docs)
}

pub fn read_documents(path: &Path) -> Result<Vec<Document>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes)?;
    parse_documents(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn docs(texts: &[&str]) -> Vec<Document> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| Document::new(format!("d{i}"), *t).unwrap())
            .collect()
    }

    #[test]
    fn cleanup_examples() {
        assert_eq!(clean_text("the  cat"), "the cat");
        assert_eq!(clean_text(""), "");
        assert_eq!(clean_text("Hello, world."), "Hello , world .");
        assert_eq!(clean_text("Hello , world ."), "Hello , world .");
        assert_eq!(clean_text("don't 3.5 1,000"), "don't 3.5 1,000");
        assert_eq!(clean_text("(see)..."), "( see ) . . .");
        assert_eq!(clean_text("a\tb\u{7}c\n\nd"), "a bc d");
    }

    #[test]
    fn clean_bytes_rejects_invalid_utf8() {
        assert!(matches!(clean_bytes(&[0x61, 0xff]), Err(Error::Decode(_))));
        assert_eq!(clean_bytes(b"x  y").unwrap(), "x y");
    }

    #[test]
    fn segmentation() {
        let seq = segment_words("the cat sat");
        assert_eq!(seq.words, ["the", "cat", "sat"]);
        assert_eq!(seq.boundaries, [(0, 3), (4, 7), (8, 11)]);
        assert!(segment_words("").is_empty());
    }

    #[test]
    fn stats_hand_counts() {
        let s = compute_stats(&docs(&["a bb a"])).unwrap();
        assert_eq!(s.total_words, 3);
        assert_eq!(s.unique_words, 2);
        assert!((s.chars_per_word - 4.0 / 3.0).abs() < 1e-12);
        let s = compute_stats(&docs(&["hello"])).unwrap();
        assert_eq!(s.chars_per_word, 5.0);
        assert!(matches!(compute_stats(&[]), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn stratification() {
        let freq = |pairs: &[(&str, u64)]| -> BTreeMap<String, u64> {
            pairs.iter().map(|(w, c)| (w.to_string(), *c)).collect()
        };
        let (rare, frequent) = stratify_by_frequency(&freq(&[("a", 1), ("b", 50)]), 10, 45).unwrap();
        assert_eq!(rare.into_iter().collect::<Vec<_>>(), ["a"]);
        assert_eq!(frequent.into_iter().collect::<Vec<_>>(), ["b"]);

        let (rare, _) = stratify_by_frequency(&freq(&[("a", 10)]), 10, 45).unwrap();
        assert!(rare.is_empty());

        let (rare, frequent) =
            stratify_by_frequency(&freq(&[("a", 9), ("b", 46), ("c", 20)]), 10, 45).unwrap();
        assert!(rare.contains("a") && !rare.contains("c"));
        assert!(frequent.contains("b") && !frequent.contains("c"));

        assert!(matches!(
            stratify_by_frequency(&freq(&[]), 45, 45),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let d = docs(&["a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k"]);
        let s1 = split_documents(&d, 0.1, 7).unwrap();
        let s2 = split_documents(&d, 0.1, 7).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(s1.valid.len(), 1);
        assert_eq!(s1.train.len(), 10);
        for v in &s1.valid {
            assert!(!s1.train.contains(v));
        }
        assert!(split_documents(&d[..1], 0.1, 7).is_err());
    }

    #[test]
    fn blank_lines_separate_documents() {
        let d = parse_documents("one line\ncontinued\n\n\n  \nsecond doc\n").unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d[0].text, "one line\ncontinued");
        assert_eq!(d[1].id, "doc-000001");
        assert!(Document::new("x", "a\0b").is_err());
    }

    proptest! {
        #[test]
        fn cleaned_words_never_contain_whitespace(raw in "\\PC{0,80}") {
            let cleaned = clean_text(&raw);
            for w in segment_words(&cleaned).words {
                prop_assert!(!w.is_empty());
                prop_assert!(!w.chars().any(char::is_whitespace));
            }
            prop_assert_eq!(clean_text(&cleaned), cleaned.clone());
            prop_assert_eq!(segment_words(&cleaned).joined(), cleaned);
        }

        #[test]
        fn stats_match_recount(texts in proptest::collection::vec("[a-c ,.]{0,30}", 1..6)) {
            let d: Vec<Document> = texts.iter().enumerate()
                .map(|(i, t)| Document::new(i.to_string(), t.clone()).unwrap()).collect();
            let mut words = Vec::new();
            for t in &texts {
                words.extend(clean_text(t).split(' ').filter(|w| !w.is_empty()).map(str::to_string));
            }
            match compute_stats(&d) {
                Ok(s) => {
                    prop_assert_eq!(s.total_words as usize, words.len());
                    prop_assert_eq!(s.word_freq.values().sum::<u64>(), s.total_words);
                    let chars: usize = words.iter().map(|w| w.chars().count()).sum();
                    prop_assert_eq!(s.total_chars as usize, chars);
                }
                Err(_) => prop_assert!(words.is_empty()),
            }
        }
    }
}
