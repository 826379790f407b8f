//! Corpus files, vocabularies, batching, pretrained embeddings and
//! synthetic tasks.

mod batch;
mod embeddings;
mod synthetic;
mod vocab;

pub use batch::{make_batches, Batch, BatchConfig, Batches, Side};
pub use embeddings::{load_embeddings, EmbeddingTable};
pub use synthetic::{gen_synthetic, SyntheticKind};
pub use vocab::{build_char_vocab, build_word_vocab, Vocab, PAD, UNK};

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pair classification or pointwise ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Ranking,
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" | "classify" => Ok(TaskKind::Classification),
            "ranking" | "rank" => Ok(TaskKind::Ranking),
            other => Err(Error::config("task", format!("unknown task kind {other:?}"))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Classification => "classification",
            TaskKind::Ranking => "ranking",
        })
    }
}

/// One line of a pair file, before tokenization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPair {
    pub label: usize,
    pub a: String,
    pub b: String,
    /// Query group of a ranking example.
    pub group: Option<String>,
}

/// Lowercases and splits on whitespace; punctuation stays attached.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Reads a tab-separated pair file.
///
/// Classification lines are `label<TAB>textA<TAB>textB`; ranking lines are
/// `group<TAB>relevance<TAB>query<TAB>candidate` with relevance 0 or 1.
/// Blank lines are skipped.
pub fn read_pairs(path: &Path, kind: TaskKind) -> Result<Vec<RawPair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pairs(&text, kind).map_err(|(line, message)| Error::Format {
        path: path.to_path_buf(),
        line,
        message,
    })?
    .ok_or_else(|| Error::Data(format!("{} contains no pairs", path.display())))
}

fn parse_pairs(text: &str, kind: TaskKind) -> Result<Option<Vec<RawPair>>, (usize, String)> {
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let want = match kind {
            TaskKind::Classification => 3,
            TaskKind::Ranking => 4,
        };
        if fields.len() != want {
            return Err((n + 1, format!("expected {want} tab-separated fields, found {}", fields.len())));
        }
        let label: usize = fields[want - 3]
            .trim()
            .parse()
            .map_err(|_| (n + 1, format!("label {:?} is not a non-negative integer", fields[want - 3])))?;
        if kind == TaskKind::Ranking && label > 1 {
            return Err((n + 1, format!("relevance must be 0 or 1, found {label}")));
        }
        let (a, b) = (fields[want - 2], fields[want - 1]);
        if tokenize(a).is_empty() || tokenize(b).is_empty() {
            return Err((n + 1, "empty text field".to_string()));
        }
        pairs.push(RawPair {
            label,
            a: a.to_string(),
            b: b.to_string(),
            group: (kind == TaskKind::Ranking).then(|| fields[0].to_string()),
        });
    }
    Ok((!pairs.is_empty()).then_some(pairs))
}

/// Writes pairs in the format [`read_pairs`] accepts.
pub fn write_pairs(path: &Path, pairs: &[RawPair], kind: TaskKind) -> Result<()> {
    let mut out = Vec::new();
    for p in pairs {
        match kind {
            TaskKind::Classification => writeln!(out, "{}\t{}\t{}", p.label, p.a, p.b),
            TaskKind::Ranking => writeln!(
                out,
                "{}\t{}\t{}\t{}",
                p.group.as_deref().unwrap_or("0"),
                p.label,
                p.a,
                p.b
            ),
        }
        .expect("write to memory");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// A pair converted to ids; `*_chars` has one entry per word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedPair {
    pub a_words: Vec<usize>,
    pub b_words: Vec<usize>,
    pub a_chars: Vec<Vec<usize>>,
    pub b_chars: Vec<Vec<usize>>,
    pub label: usize,
    pub group: Option<usize>,
}

/// Converts raw pairs to ids. Ranking group names are numbered in order of
/// first appearance.
pub fn tokenize_pairs(pairs: &[RawPair], words: &Vocab, chars: &Vocab) -> Vec<TokenizedPair> {
    let mut groups: HashMap<&str, usize> = HashMap::new();
    let side = |text: &str| {
        let tokens = tokenize(text);
        let ids = tokens.iter().map(|t| words.id(t)).collect();
        let char_ids = tokens
            .iter()
            .map(|t| {
                let mut buf = [0u8; 4];
                t.chars().map(|c| chars.id(c.encode_utf8(&mut buf))).collect()
            })
            .collect();
        (ids, char_ids)
    };
    pairs
        .iter()
        .map(|p| {
            let (a_words, a_chars) = side(&p.a);
            let (b_words, b_chars) = side(&p.b);
            let group = p.group.as_deref().map(|name| {
                let next = groups.len();
                *groups.entry(name).or_insert(next)
            });
            TokenizedPair {
                a_words,
                b_words,
                a_chars,
                b_chars,
                label: p.label,
                group,
            }
        })
        .collect()
}
