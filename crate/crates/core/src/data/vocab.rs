use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{tokenize, RawPair};

/// Padding id; its embedding row is always zero.
pub const PAD: usize = 0;
/// Id of every out-of-vocabulary token.
pub const UNK: usize = 1;

const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Token ↔ id bijection with [`PAD`] and [`UNK`] reserved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// A vocabulary holding only the reserved entries plus `tokens` in order.
    /// Duplicates and the reserved spellings are ignored.
    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in [PAD_TOKEN.to_string(), UNK_TOKEN.to_string()]
            .into_iter()
            .chain(tokens.into_iter().map(Into::into))
        {
            if !v.index.contains_key(&t) {
                v.index.insert(t.clone(), v.tokens.len());
                v.tokens.push(t);
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i).unwrap_or(UNK_TOKEN)).collect()
    }

    /// Non-reserved tokens in id order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, &str)> {
        self.tokens.iter().enumerate().skip(2).map(|(i, t)| (i, t.as_str()))
    }
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        Vocab::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

/// Keeps tokens seen at least `min_count` times, ordered by count
/// descending then token ascending.
fn ranked(counts: HashMap<String, usize>, min_count: usize) -> Vocab {
    let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
    kept.sort_by(|(ta, ca), (tb, cb)| cb.cmp(ca).then_with(|| ta.cmp(tb)));
    Vocab::from_tokens(kept.into_iter().map(|(t, _)| t))
}

pub fn build_word_vocab(pairs: &[RawPair], min_count: usize) -> Vocab {
    let mut counts = HashMap::new();
    for p in pairs {
        for t in tokenize(&p.a).into_iter().chain(tokenize(&p.b)) {
            *counts.entry(t).or_insert(0) += 1;
        }
    }
    ranked(counts, min_count)
}

/// Every character occurring in the corpus (after lowercasing).
pub fn build_char_vocab(pairs: &[RawPair]) -> Vocab {
    let mut counts = HashMap::new();
    for p in pairs {
        for t in tokenize(&p.a).into_iter().chain(tokenize(&p.b)) {
            for c in t.chars() {
                *counts.entry(c.to_string()).or_insert(0) += 1;
            }
        }
    }
    ranked(counts, 1)
}
