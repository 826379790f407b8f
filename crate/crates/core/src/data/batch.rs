use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{TokenizedPair, PAD};
use crate::error::{Error, Result};

/// Batching limits. Longer sequences and words are truncated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub max_len: usize,
    pub max_word_len: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            batch_size: 32,
            max_len: 64,
            max_word_len: 16,
        }
    }
}

/// One padded side of a batch. Rows are right-padded with [`PAD`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Side {
    /// `[batch][len]`
    pub words: Vec<Vec<usize>>,
    /// `[batch][len][word_len]`
    pub chars: Vec<Vec<Vec<usize>>>,
    /// `[batch][len]`, true at real tokens.
    pub mask: Vec<Vec<bool>>,
}

impl Side {
    pub fn len(&self) -> usize {
        self.mask.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn build(seqs: &[(&[usize], &[Vec<usize>])], cfg: &BatchConfig, truncated: &mut usize) -> Side {
        let len = seqs.iter().map(|(w, _)| w.len().min(cfg.max_len)).max().unwrap_or(0);
        let word_len = seqs
            .iter()
            .flat_map(|(_, c)| c.iter().take(cfg.max_len))
            .map(|c| c.len().min(cfg.max_word_len))
            .max()
            .unwrap_or(0);
        let mut side = Side {
            words: Vec::with_capacity(seqs.len()),
            chars: Vec::with_capacity(seqs.len()),
            mask: Vec::with_capacity(seqs.len()),
        };
        for (words, chars) in seqs {
            if words.len() > cfg.max_len {
                *truncated += 1;
            }
            let real = words.len().min(cfg.max_len);
            let mut w = words[..real].to_vec();
            w.resize(len, PAD);
            let mut c: Vec<Vec<usize>> = chars[..real]
                .iter()
                .map(|cs| {
                    let mut cs = cs[..cs.len().min(cfg.max_word_len)].to_vec();
                    cs.resize(word_len, PAD);
                    cs
                })
                .collect();
            c.resize(len, vec![PAD; word_len]);
            side.words.push(w);
            side.chars.push(c);
            side.mask.push((0..len).map(|i| i < real).collect());
        }
        side
    }
}

/// Padded ids and masks for a group of pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub a: Side,
    pub b: Side,
    pub labels: Vec<usize>,
    pub groups: Vec<Option<usize>>,
}

impl Batch {
    pub fn from_pairs(pairs: &[&TokenizedPair], cfg: &BatchConfig, truncated: &mut usize) -> Batch {
        let a: Vec<_> = pairs.iter().map(|p| (&p.a_words[..], &p.a_chars[..])).collect();
        let b: Vec<_> = pairs.iter().map(|p| (&p.b_words[..], &p.b_chars[..])).collect();
        Batch {
            a: Side::build(&a, cfg, truncated),
            b: Side::build(&b, cfg, truncated),
            labels: pairs.iter().map(|p| p.label).collect(),
            groups: pairs.iter().map(|p| p.group).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Batches plus the number of sequences that were cut to `max_len`.
#[derive(Debug, Clone)]
pub struct Batches {
    pub batches: Vec<Batch>,
    pub truncated: usize,
}

/// Groups pairs into batches.
///
/// Pairs sharing a ranking group are kept together (a batch may exceed
/// `batch_size` to hold a large group). With `shuffle_seed`, the order of
/// pairs or groups is shuffled deterministically.
pub fn make_batches(pairs: &[TokenizedPair], cfg: &BatchConfig, shuffle_seed: Option<u64>) -> Result<Batches> {
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    if cfg.max_len == 0 || cfg.max_word_len == 0 {
        return Err(Error::config("max_len", "length caps must be at least 1"));
    }
    let mut units: Vec<Vec<usize>> = Vec::new();
    let mut group_unit: HashMap<usize, usize> = HashMap::new();
    for (i, p) in pairs.iter().enumerate() {
        match p.group.map(|g| (g, group_unit.get(&g).copied())) {
            Some((_, Some(u))) => units[u].push(i),
            Some((g, None)) => {
                group_unit.insert(g, units.len());
                units.push(vec![i]);
            }
            None => units.push(vec![i]),
        }
    }
    if let Some(seed) = shuffle_seed {
        units.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let mut truncated = 0;
    let mut batches = Vec::new();
    let mut current: Vec<&TokenizedPair> = Vec::new();
    for unit in units {
        if !current.is_empty() && current.len() + unit.len() > cfg.batch_size {
            batches.push(Batch::from_pairs(&current, cfg, &mut truncated));
            current.clear();
        }
        current.extend(unit.iter().map(|&i| &pairs[i]));
    }
    if !current.is_empty() {
        batches.push(Batch::from_pairs(&current, cfg, &mut truncated));
    }
    Ok(Batches { batches, truncated })
}
