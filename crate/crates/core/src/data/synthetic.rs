//! Small generated corpora whose labels follow exactly from construction.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{RawPair, TaskKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    /// Label 1: `b` is a permutation of `a`; label 0: `b` is resampled.
    Paraphrase,
    /// Label 0: `b ⊆ a`; 1: disjoint; 2: partial overlap.
    Entailment3,
    /// Ten candidates per query; the relevant one shares the query's key token.
    Ranking,
    /// Paraphrase over synonym classes: `b` permutes `a`'s concepts and
    /// re-spells each with a random synonym; negatives swap two concepts.
    Multihop,
}

impl SyntheticKind {
    pub fn task(self) -> TaskKind {
        match self {
            SyntheticKind::Ranking => TaskKind::Ranking,
            _ => TaskKind::Classification,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            SyntheticKind::Entailment3 => 3,
            _ => 2,
        }
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paraphrase" => Ok(SyntheticKind::Paraphrase),
            "entailment3" => Ok(SyntheticKind::Entailment3),
            "ranking" => Ok(SyntheticKind::Ranking),
            "multihop" => Ok(SyntheticKind::Multihop),
            other => Err(Error::config("synthetic", format!("unknown synthetic task {other:?}"))),
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticKind::Paraphrase => "paraphrase",
            SyntheticKind::Entailment3 => "entailment3",
            SyntheticKind::Ranking => "ranking",
            SyntheticKind::Multihop => "multihop",
        })
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// A pronounceable two-syllable word, distinct for every `i < 4900`.
fn word(i: usize) -> String {
    let syllables = CONSONANTS.len() * VOWELS.len();
    let j = (i * 37 + 11) % (syllables * syllables);
    let syl = |k: usize| {
        let c = CONSONANTS[k / VOWELS.len()] as char;
        let v = VOWELS[k % VOWELS.len()] as char;
        format!("{c}{v}")
    };
    syl(j / syllables) + &syl(j % syllables)
}

const FILLER: usize = 40;
const KEYS: usize = 20;
const CONCEPTS: usize = 16;
const CANDIDATES: usize = 10;

fn filler(rng: &mut impl Rng) -> String {
    word(rng.gen_range(0..FILLER))
}

fn join(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// `size` pairs (for ranking, `size` query groups of ten candidates).
pub fn gen_synthetic(kind: SyntheticKind, size: usize, seed: u64) -> Vec<RawPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pair = |label, a: &[String], b: &[String]| RawPair {
        label,
        a: join(a),
        b: join(b),
        group: None,
    };
    let mut out = Vec::new();
    match kind {
        SyntheticKind::Paraphrase => {
            for _ in 0..size {
                let len = rng.gen_range(4..=8);
                let a: Vec<String> = (0..len).map(|_| filler(&mut rng)).collect();
                if rng.gen_bool(0.5) {
                    let mut b = a.clone();
                    b.shuffle(&mut rng);
                    out.push(pair(1, &a, &b));
                } else {
                    let b: Vec<String> = (0..len).map(|_| filler(&mut rng)).collect();
                    out.push(pair(0, &a, &b));
                }
            }
        }
        SyntheticKind::Entailment3 => {
            for _ in 0..size {
                let mut pool: Vec<usize> = (0..FILLER).collect();
                pool.shuffle(&mut rng);
                let len = rng.gen_range(5..=7);
                let (inside, outside) = pool.split_at(len);
                let label = rng.gen_range(0..3);
                let mut b: Vec<usize> = match label {
                    0 => inside[..rng.gen_range(2..=4)].to_vec(),
                    1 => outside[..rng.gen_range(2..=4)].to_vec(),
                    _ => {
                        let shared = rng.gen_range(1..=2);
                        let fresh = rng.gen_range(1..=2);
                        inside[..shared].iter().chain(&outside[..fresh]).copied().collect()
                    }
                };
                b.shuffle(&mut rng);
                let a: Vec<String> = inside.iter().map(|&i| word(i)).collect();
                let b: Vec<String> = b.into_iter().map(word).collect();
                out.push(pair(label, &a, &b));
            }
        }
        SyntheticKind::Ranking => {
            for q in 0..size {
                let key = rng.gen_range(0..KEYS);
                let with_key = |rng: &mut ChaCha8Rng, k: usize| {
                    let mut t: Vec<String> = (0..rng.gen_range(3..=5)).map(|_| filler(rng)).collect();
                    let at = rng.gen_range(0..=t.len());
                    t.insert(at, word(1000 + k));
                    t
                };
                let query = with_key(&mut rng, key);
                let mut cands = vec![(1, with_key(&mut rng, key))];
                for _ in 1..CANDIDATES {
                    let other = (key + rng.gen_range(1..KEYS)) % KEYS;
                    cands.push((0, with_key(&mut rng, other)));
                }
                cands.shuffle(&mut rng);
                for (label, c) in cands {
                    out.push(RawPair {
                        label,
                        a: join(&query),
                        b: join(&c),
                        group: Some(format!("q{q}")),
                    });
                }
            }
        }
        SyntheticKind::Multihop => {
            let spell = |rng: &mut ChaCha8Rng, c: usize| word(2000 + 2 * c + rng.gen_range(0..2));
            for _ in 0..size {
                let len = rng.gen_range(4..=6);
                let concepts: Vec<usize> = (0..len).map(|_| rng.gen_range(0..CONCEPTS)).collect();
                let mut other = concepts.clone();
                other.shuffle(&mut rng);
                let label = usize::from(rng.gen_bool(0.5));
                let sorted = |v: &[usize]| {
                    let mut v = v.to_vec();
                    v.sort_unstable();
                    v
                };
                while label == 0 && sorted(&other) == sorted(&concepts) {
                    let mut slots: Vec<usize> = (0..len).collect();
                    slots.shuffle(&mut rng);
                    for &s in &slots[..2] {
                        other[s] = (other[s] + rng.gen_range(1..CONCEPTS)) % CONCEPTS;
                    }
                }
                let a: Vec<String> = concepts.iter().map(|&c| spell(&mut rng, c)).collect();
                let b: Vec<String> = other.iter().map(|&c| spell(&mut rng, c)).collect();
                out.push(pair(label, &a, &b));
            }
        }
    }
    out
}
