//! Byte, character, word and BPE subword tokenizers sharing one
//! encode/decode contract and a fixed special-token inventory.
//!
//! In the flat token streams produced here, words are separated by the
//! separator token of the scheme (the space byte, the space character, or the
//! space symbol of the subword base alphabet). The word scheme has no
//! separator: every token is a whole word.

mod bpe;
mod vocab;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{document_words, Document};
use crate::error::{Error, Result};

pub use bpe::{train_bpe, BpeModel, BpeTraining};
pub use vocab::{is_special, Vocab, BOS, CLS, EOW, NUM_SPECIALS, PAD, SPECIAL_TOKENS, UNK};

/// Offset applied to raw byte values in the byte scheme.
pub const BYTE_OFFSET: u32 = NUM_SPECIALS;
/// Text substituted for UNK when decoding.
pub const UNK_TEXT: &str = "\u{FFFD}";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Byte,
    Char,
    Subword,
    Word,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Byte, Scheme::Char, Scheme::Subword, Scheme::Word];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Byte => "byte",
            Scheme::Char => "char",
            Scheme::Subword => "subword",
            Scheme::Word => "word",
        }
    }

    /// Whether the scheme can feed a word-pooling model (one token per base unit).
    pub fn is_base_unit(self) -> bool {
        matches!(self, Scheme::Byte | Scheme::Char)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "byte" => Ok(Scheme::Byte),
            "char" => Ok(Scheme::Char),
            "subword" => Ok(Scheme::Subword),
            "word" => Ok(Scheme::Word),
            other => Err(Error::UnknownScheme(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub scheme: Scheme,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Tokenizer {
    Byte,
    Char(Vocab),
    Subword(BpeModel),
    Word(Vocab),
}

/// Options for [`Tokenizer::train`].
#[derive(Clone, Copy, Debug)]
pub struct TokenizerOptions {
    pub subword_vocab_size: usize,
    pub word_vocab_max: usize,
}

impl Default for TokenizerOptions {
    fn default() -> Self {
        TokenizerOptions {
            subword_vocab_size: 2048,
            word_vocab_max: 50_000,
        }
    }
}

pub fn encode_bytes(text: &str) -> TokenSeq {
    TokenSeq {
        ids: text.bytes().map(|b| b as u32 + BYTE_OFFSET).collect(),
        scheme: Scheme::Byte,
    }
}

/// Character vocabulary of the (cleaned) training documents plus the space
/// separator, sorted by code point.
pub fn build_char_vocab(train_docs: &[Document]) -> Vocab {
    let mut chars: Vec<char> = vec![' '];
    for doc in train_docs {
        for word in document_words(doc).words {
            chars.extend(word.chars());
        }
    }
    chars.sort_unstable();
    chars.dedup();
    let mut vocab = Vocab::with_specials();
    for c in chars {
        vocab.push(&c.to_string());
    }
    vocab
}

pub fn encode_chars(text: &str, vocab: &Vocab) -> TokenSeq {
    TokenSeq {
        ids: text.chars().map(|c| bpe::base_id(vocab, c)).collect(),
        scheme: Scheme::Char,
    }
}

/// Word vocabulary ordered by descending training frequency (ties
/// lexicographic), truncated to `max_size` entries including specials.
pub fn build_word_vocab(train_docs: &[Document], max_size: usize) -> Vocab {
    let mut freq: BTreeMap<String, u64> = BTreeMap::new();
    for doc in train_docs {
        for w in document_words(doc).words {
            *freq.entry(w).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, u64)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut vocab = Vocab::with_specials();
    for (w, _) in ranked {
        vocab.push(&w);
    }
    vocab.truncate(max_size);
    vocab
}

pub fn encode_words(text: &str, vocab: &Vocab) -> TokenSeq {
    TokenSeq {
        ids: text.split_whitespace().map(|w| vocab.id_or_unk(w)).collect(),
        scheme: Scheme::Word,
    }
}

/// Trains BPE on the words of the training documents. The base alphabet is
/// the character vocabulary.
pub fn train_subwords(train_docs: &[Document], target_vocab_size: usize) -> Result<BpeTraining> {
    let base = build_char_vocab(train_docs);
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for doc in train_docs {
        for w in document_words(doc).words {
            *counts.entry(w).or_default() += 1;
        }
    }
    train_bpe(base, &counts, target_vocab_size)
}

pub fn encode_subwords(text: &str, model: &BpeModel) -> TokenSeq {
    let space = bpe::base_id(model.vocab(), ' ');
    let mut ids = Vec::new();
    for (i, piece) in text.split(' ').enumerate() {
        if i > 0 {
            ids.push(space);
        }
        if !piece.is_empty() {
            ids.extend(model.encode_word(piece));
        }
    }
    TokenSeq {
        ids,
        scheme: Scheme::Subword,
    }
}

fn decode_vocab(ids: &[u32], vocab: &Vocab, sep: &str) -> String {
    let mut parts = Vec::with_capacity(ids.len());
    for &id in ids {
        if id == UNK {
            parts.push(UNK_TEXT);
        } else if !is_special(id) {
            if let Some(t) = vocab.token(id) {
                parts.push(t);
            }
        }
    }
    parts.join(sep)
}

impl Tokenizer {
    pub fn train(scheme: Scheme, train_docs: &[Document], opts: TokenizerOptions) -> Result<Self> {
        Ok(match scheme {
            Scheme::Byte => Tokenizer::Byte,
            Scheme::Char => Tokenizer::Char(build_char_vocab(train_docs)),
            Scheme::Subword => {
                Tokenizer::Subword(train_subwords(train_docs, opts.subword_vocab_size)?.model)
            }
            Scheme::Word => Tokenizer::Word(build_word_vocab(train_docs, opts.word_vocab_max)),
        })
    }

    pub fn scheme(&self) -> Scheme {
        match self {
            Tokenizer::Byte => Scheme::Byte,
            Tokenizer::Char(_) => Scheme::Char,
            Tokenizer::Subword(_) => Scheme::Subword,
            Tokenizer::Word(_) => Scheme::Word,
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenizer::Byte => (BYTE_OFFSET + 256) as usize,
            Tokenizer::Char(v) | Tokenizer::Word(v) => v.len(),
            Tokenizer::Subword(m) => m.vocab().len(),
        }
    }

    pub fn encode(&self, text: &str) -> TokenSeq {
        match self {
            Tokenizer::Byte => encode_bytes(text),
            Tokenizer::Char(v) => encode_chars(text, v),
            Tokenizer::Subword(m) => encode_subwords(text, m),
            Tokenizer::Word(v) => encode_words(text, v),
        }
    }

    /// Tokens of a single word, without separators.
    pub fn encode_word(&self, word: &str) -> Vec<u32> {
        match self {
            Tokenizer::Subword(m) => m.encode_word(word),
            _ => self.encode(word).ids,
        }
    }

    /// Decodes ids back to text. Special tokens other than UNK are dropped;
    /// invalid UTF-8 in the byte scheme is replaced with U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> String {
        match self {
            Tokenizer::Byte => {
                let bytes: Vec<u8> = ids
                    .iter()
                    .filter(|&&id| (BYTE_OFFSET..BYTE_OFFSET + 256).contains(&id))
                    .map(|&id| (id - BYTE_OFFSET) as u8)
                    .collect();
                String::from_utf8_lossy(&bytes).into_owned()
            }
            Tokenizer::Char(v) => decode_vocab(ids, v, ""),
            Tokenizer::Subword(m) => decode_vocab(ids, m.vocab(), ""),
            Tokenizer::Word(v) => decode_vocab(ids, v, " "),
        }
    }

    /// Raw bytes of a byte-scheme sequence, for callers that validate UTF-8
    /// themselves.
    pub fn decode_bytes(ids: &[u32]) -> Vec<u8> {
        ids.iter()
            .filter(|&&id| (BYTE_OFFSET..BYTE_OFFSET + 256).contains(&id))
            .map(|&id| (id - BYTE_OFFSET) as u8)
            .collect()
    }

    /// Display string for one token.
    pub fn token_text(&self, id: u32) -> String {
        if is_special(id) {
            return SPECIAL_TOKENS[id as usize].to_string();
        }
        match self {
            Tokenizer::Byte => format!("<0x{:02X}>", id - BYTE_OFFSET),
            Tokenizer::Char(v) | Tokenizer::Word(v) => v.token(id).unwrap_or(UNK_TEXT).to_string(),
            Tokenizer::Subword(m) => m.vocab().token(id).unwrap_or(UNK_TEXT).to_string(),
        }
    }

    /// Id of the word separator in flat streams (`None` for the word scheme).
    pub fn separator(&self) -> Option<u32> {
        match self {
            Tokenizer::Byte => Some(b' ' as u32 + BYTE_OFFSET),
            Tokenizer::Char(v) => v.id(" "),
            Tokenizer::Subword(m) => m.vocab().id(" "),
            Tokenizer::Word(_) => None,
        }
    }

    /// Characters credited when this token is predicted correctly. Byte
    /// tokens credit one unit each.
    pub fn credit(&self, id: u32) -> usize {
        if is_special(id) {
            return 1;
        }
        match self {
            Tokenizer::Byte => 1,
            Tokenizer::Char(_) => 1,
            Tokenizer::Subword(m) => m.vocab().token(id).map_or(1, |t| t.chars().count().max(1)),
            Tokenizer::Word(v) => v.token(id).map_or(1, |t| t.chars().count().max(1)),
        }
    }

    /// Mean characters per token over `docs` rendered as a flat stream
    /// (cleaned words joined by single spaces, documents joined by a space).
    /// For the word scheme this is the mean word length.
    pub fn chars_per_token(&self, docs: &[Document]) -> Result<f64> {
        let mut chars = 0usize;
        let mut tokens = 0usize;
        for doc in docs {
            let words = document_words(doc);
            if words.is_empty() {
                continue;
            }
            match self {
                Tokenizer::Word(_) => {
                    chars += words.words.iter().map(|w| w.chars().count()).sum::<usize>();
                    tokens += words.len();
                }
                _ => {
                    let text = words.joined();
                    // separator between documents
                    chars += text.chars().count() + 1;
                    tokens += self.encode(&text).len() + 1;
                }
            }
        }
        if tokens == 0 {
            return Err(Error::EmptyCorpus);
        }
        Ok(chars as f64 / tokens as f64)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let vocab_path = dir.join("vocab.json");
        let write_vocab = |v: &Vocab| -> Result<()> {
            let json = serde_json::to_string_pretty(&v.to_map())?;
            std::fs::write(&vocab_path, json).map_err(|e| Error::io(&vocab_path, e))
        };
        match self {
            Tokenizer::Byte => write_vocab(&Vocab::with_specials())?,
            Tokenizer::Char(v) | Tokenizer::Word(v) => write_vocab(v)?,
            Tokenizer::Subword(m) => m.save(&vocab_path, &dir.join("merges.txt"))?,
        }
        let meta = dir.join("tokenizer.json");
        let json = serde_json::to_string_pretty(&serde_json::json!({ "scheme": self.scheme() }))?;
        std::fs::write(&meta, json).map_err(|e| Error::io(&meta, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta = dir.join("tokenizer.json");
        let text = std::fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
        #[derive(Deserialize)]
        struct Meta {
            scheme: Scheme,
        }
        let meta: Meta = serde_json::from_str(&text)?;
        let vocab_path = dir.join("vocab.json");
        let read_vocab = || -> Result<Vocab> {
            let text = std::fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
            Vocab::from_map(&serde_json::from_str(&text)?)
        };
        Ok(match meta.scheme {
            Scheme::Byte => Tokenizer::Byte,
            Scheme::Char => Tokenizer::Char(read_vocab()?),
            Scheme::Word => Tokenizer::Word(read_vocab()?),
            Scheme::Subword => Tokenizer::Subword(BpeModel::load(&vocab_path, &dir.join("merges.txt"))?),
        })
    }
}

/// Self-contained JSON form of a tokenizer, embedded in checkpoints.
#[derive(Serialize, Deserialize)]
struct TokenizerJson {
    scheme: Scheme,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<BTreeMap<String, u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    merges: Option<Vec<(String, String)>>,
}

impl Tokenizer {
    pub fn to_json(&self) -> serde_json::Value {
        let (vocab, merges) = match self {
            Tokenizer::Byte => (None, None),
            Tokenizer::Char(v) | Tokenizer::Word(v) => (Some(v.to_map()), None),
            // merges are replayed on top of the base alphabet, which ends
            // where the first merged token begins (base tokens are single
            // characters, so that token is always new)
            Tokenizer::Subword(m) => {
                let mut base = m.vocab().clone();
                if let Some((l, r)) = m.merges().first() {
                    base.truncate(m.vocab().id(&format!("{l}{r}")).map_or(base.len(), |id| id as usize));
                }
                (Some(base.to_map()), Some(m.merges().to_vec()))
            }
        };
        serde_json::to_value(TokenizerJson {
            scheme: self.scheme(),
            vocab,
            merges,
        })
        .unwrap_or_default()
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let t: TokenizerJson = serde_json::from_value(value.clone())?;
        let vocab = || -> Result<Vocab> {
            Vocab::from_map(t.vocab.as_ref().ok_or_else(|| Error::config("tokenizer JSON lacks a vocabulary"))?)
        };
        Ok(match t.scheme {
            Scheme::Byte => Tokenizer::Byte,
            Scheme::Char => Tokenizer::Char(vocab()?),
            Scheme::Word => Tokenizer::Word(vocab()?),
            Scheme::Subword => Tokenizer::Subword(BpeModel::from_parts(vocab()?, t.merges.clone().unwrap_or_default())?),
        })
    }
}

/// Context length in tokens that carries `t_chars` characters of
/// information, given the mean characters per token of the scheme on the
/// corpus (1 for characters, chars/byte for bytes, chars/subword for
/// subwords, chars/word for words).
pub fn context_budget(scheme: Scheme, chars_per_token: f64, t_chars: usize) -> Result<usize> {
    if t_chars == 0 {
        return Err(Error::config("context must hold at least one character"));
    }
    let ratio = match scheme {
        Scheme::Char => 1.0,
        _ => chars_per_token,
    };
    if !(ratio.is_finite() && ratio > 0.0) {
        return Err(Error::config(format!(
            "chars per token must be positive, got {ratio}"
        )));
    }
    // tolerance keeps exact ratios such as 192 / 1.0 from rounding down
    let budget = (t_chars as f64 / ratio + 1e-9).floor() as usize;
    Ok(budget.max(1))
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
    fn byte_encoding() {
        assert_eq!(encode_bytes("A").ids, vec![70]);
        assert!(encode_bytes("").is_empty());
        // UTF-8 oracle: std's encoder
        let expected: Vec<u32> = "é".as_bytes().iter().map(|&b| b as u32 + 5).collect();
        assert_eq!(encode_bytes("é").ids, expected);
        assert_eq!(expected, vec![0xC3 + 5, 0xA9 + 5]);
        assert_eq!(Tokenizer::Byte.decode(&encode_bytes("é x").ids), "é x");
    }

    #[test]
    fn char_encoding_with_unk() {
        let v = build_char_vocab(&docs(&["ab"]));
        let a = v.id("a").unwrap();
        let b = v.id("b").unwrap();
        assert_eq!(encode_chars("aba", &v).ids, vec![a, b, a]);
        assert_eq!(encode_chars("ac", &v).ids, vec![a, UNK]);
        assert_eq!(Tokenizer::Char(v).decode(&[a, UNK]), format!("a{UNK_TEXT}"));
    }

    #[test]
    fn json_roundtrip_all_schemes() {
        let d = docs(&["the cat sat on the mat", "a cat and a hat"]);
        for scheme in Scheme::ALL {
            let opts = TokenizerOptions {
                subword_vocab_size: 30,
                ..TokenizerOptions::default()
            };
            let tok = Tokenizer::train(scheme, &d, opts).unwrap();
            let back = Tokenizer::from_json(&tok.to_json()).unwrap();
            assert_eq!(back, tok, "{scheme}");
        }
    }

    #[test]
    fn word_encoding() {
        let v = build_word_vocab(&docs(&["the cat"]), 100);
        let the = v.id("the").unwrap();
        assert_eq!(encode_words("the dog", &v).ids, vec![the, UNK]);
        assert!(encode_words("", &v).is_empty());
    }

    #[test]
    fn word_vocab_size_equals_unique_words() {
        let d = docs(&["a b a c , d", "c c e"]);
        let stats = crate::corpus::compute_stats(&d).unwrap();
        let v = build_word_vocab(&d, 1000);
        assert_eq!(v.len() - NUM_SPECIALS as usize, stats.unique_words as usize);
    }

    #[test]
    fn subword_encoding_with_single_merge() {
        let base = build_char_vocab(&docs(&["ab"]));
        let model = BpeModel::from_parts(base, vec![("a".into(), "b".into())]).unwrap();
        let seq = encode_subwords("ab ab", &model);
        let ab = model.vocab().id("ab").unwrap();
        let space = model.vocab().id(" ").unwrap();
        assert_eq!(seq.ids, vec![ab, space, ab]);
        assert_eq!(Tokenizer::Subword(model).decode(&seq.ids), "ab ab");
    }

    #[test]
    fn subword_without_merges_matches_chars() {
        let d = docs(&["hello world"]);
        let chars = build_char_vocab(&d);
        let model = BpeModel::from_base(chars.clone());
        let t = "low hello";
        assert_eq!(encode_subwords(t, &model).ids, encode_chars(t, &chars).ids);
    }

    #[test]
    fn budgets() {
        assert_eq!(context_budget(Scheme::Char, 1.0, 192).unwrap(), 192);
        assert_eq!(context_budget(Scheme::Subword, 2.8, 192).unwrap(), 68);
        assert_eq!(context_budget(Scheme::Word, 5.46, 192).unwrap(), 35);
        assert_eq!(context_budget(Scheme::Byte, 1.0, 192).unwrap(), 192);
        // two bytes per char on average doubles the byte budget
        assert_eq!(context_budget(Scheme::Byte, 0.5, 192).unwrap(), 384);
        assert!(context_budget(Scheme::Char, 1.0, 0).is_err());
        assert!(matches!("bogus".parse::<Scheme>(), Err(Error::UnknownScheme(_))));
    }

    #[test]
    fn save_load_all_schemes() {
        let d = docs(&["the cat sat on the mat", "a cat is not a hat"]);
        let dir = tempfile::tempdir().unwrap();
        for scheme in Scheme::ALL {
            let opts = TokenizerOptions {
                subword_vocab_size: 40,
                word_vocab_max: 100,
            };
            let tok = Tokenizer::train(scheme, &d, opts).unwrap();
            let sub = dir.path().join(scheme.as_str());
            std::fs::create_dir_all(&sub).unwrap();
            tok.save(&sub).unwrap();
            let back = Tokenizer::load(&sub).unwrap();
            assert_eq!(back.scheme(), scheme);
            assert_eq!(back.encode("the cat").ids, tok.encode("the cat").ids);
        }
    }

    proptest! {
        #[test]
        fn byte_roundtrip(s in "\\PC{0,40}") {
            prop_assert_eq!(Tokenizer::Byte.decode(&encode_bytes(&s).ids), s);
        }

        #[test]
        fn char_roundtrip_masks_unseen(s in "[a-e é]{0,30}") {
            let v = build_char_vocab(&docs(&["abc d"]));
            let tok = Tokenizer::Char(v.clone());
            let expected: String = s.chars()
                .map(|c| if v.id(&c.to_string()).is_some() { c.to_string() } else { UNK_TEXT.to_string() })
                .collect();
            prop_assert_eq!(tok.decode(&tok.encode(&s).ids), expected);
        }
    }
}
