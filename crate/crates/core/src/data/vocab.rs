use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{DreamError, Result};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const SEP: usize = 3;
pub const UNK: usize = 4;

pub const RESERVED: [&str; 5] = ["<PAD>", "<START>", "<END>", "[SEP]", "<UNK>"];
pub const MAX_VOCAB: usize = 5000;

/// Word-level vocabulary with reserved ids `0..5`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = DreamError;

    fn try_from(words: Vec<String>) -> Result<Self> {
        if words.len() < RESERVED.len() || words.iter().zip(RESERVED).any(|(w, r)| w != r) {
            return Err(DreamError::Dataset("vocabulary does not start with the reserved tokens".into()));
        }
        if words.len() > MAX_VOCAB {
            return Err(DreamError::Dataset(format!("vocabulary of {} exceeds {MAX_VOCAB}", words.len())));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(DreamError::Dataset(format!("duplicate vocabulary entry `{w}`")));
            }
        }
        Ok(Vocab { words, index })
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

/// Splits on whitespace and lowercases everything except reserved tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| if RESERVED.contains(&w) { w.to_string() } else { w.to_lowercase() })
        .collect()
}

impl Vocab {
    /// Keeps the `max_size − 5` most frequent words, ties broken
    /// lexicographically.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Vocab> {
        let max_size = max_size.min(MAX_VOCAB);
        if max_size < RESERVED.len() {
            return Err(DreamError::config("vocab_size", "smaller than the reserved set"));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut texts = 0;
        for text in corpus {
            texts += 1;
            for w in tokenize(text) {
                if !RESERVED.contains(&w.as_str()) {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
        if texts == 0 {
            return Err(DreamError::Dataset("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let words: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().take(max_size - RESERVED.len()).map(|(w, _)| w))
            .collect();
        Vocab::try_from(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        self.encode_reporting(text).0
    }

    /// Ids plus the words that fell back to `<UNK>`.
    pub fn encode_reporting(&self, text: &str) -> (Vec<usize>, Vec<String>) {
        let mut unknown = Vec::new();
        let ids = tokenize(text)
            .into_iter()
            .map(|w| {
                self.id(&w).unwrap_or_else(|| {
                    unknown.push(w);
                    UNK
                })
            })
            .collect();
        (ids, unknown)
    }

    /// Joins words, skipping padding and start tokens and stopping at the
    /// end token.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&t| t != END)
            .filter(|&&t| t != PAD && t != START)
            .map(|&t| self.word(t).unwrap_or(RESERVED[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Tokens without reserved markers, as used for scoring.
    pub fn content_tokens(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&t| t != END)
            .filter(|&&t| t != PAD && t != START)
            .map(|&t| self.word(t).unwrap_or(RESERVED[UNK]).to_string())
            .collect()
    }
}
