use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const EOW: u32 = 3;
pub const BOS: u32 = 4;
pub const NUM_SPECIALS: u32 = 5;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS as usize] = ["<pad>", "<unk>", "<cls>", "<eow>", "<bos>"];

pub fn is_special(id: u32) -> bool {
    id < NUM_SPECIALS
}

/// Bidirectional token/id map. Ids `0..5` are always the special tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::with_specials()
    }
}

impl Vocab {
    pub fn with_specials() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for tok in SPECIAL_TOKENS {
            v.push(tok);
        }
        v
    }

    /// Inserts `token` if absent and returns its id.
    pub fn push(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.ids.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn to_map(&self) -> BTreeMap<String, u32> {
        self.ids.iter().map(|(k, &v)| (k.clone(), v)).collect()
    }

    /// Rebuilds a vocabulary from a token→id map. Ids must be contiguous.
    /// Maps that lack the special tokens (external vocabularies) are shifted
    /// up by five so the specials keep ids `0..5`.
    pub fn from_map(map: &BTreeMap<String, u32>) -> Result<Self> {
        let mut by_id: Vec<(u32, &String)> = map.iter().map(|(k, &v)| (v, k)).collect();
        by_id.sort();
        for (expected, (id, _)) in by_id.iter().enumerate() {
            if *id as usize != expected {
                return Err(Error::config(format!(
                    "vocabulary ids are not contiguous at id {id}"
                )));
            }
        }
        let has_specials = SPECIAL_TOKENS
            .iter()
            .enumerate()
            .all(|(i, tok)| map.get(*tok) == Some(&(i as u32)));
        if has_specials {
            let mut v = Vocab {
                tokens: Vec::new(),
                ids: HashMap::new(),
            };
            for (_, tok) in by_id {
                v.push(tok);
            }
            return Ok(v);
        }
        if SPECIAL_TOKENS.iter().any(|t| map.contains_key(*t)) {
            return Err(Error::config(
                "special tokens present at non-reserved ids".to_string(),
            ));
        }
        let mut v = Vocab::with_specials();
        for (_, tok) in by_id {
            v.push(tok);
        }
        Ok(v)
    }

    /// Keeps the specials and the first `max_size - 5` regular tokens.
    pub fn truncate(&mut self, max_size: usize) {
        let keep = max_size.max(NUM_SPECIALS as usize);
        for tok in self.tokens.drain(keep.min(self.tokens.len())..) {
            self.ids.remove(&tok);
        }
    }
}
