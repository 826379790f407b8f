use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;

use super::{Vocab, PAD};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{glorot_uniform, Tensor};

/// Word table built from a pretrained embedding file.
#[derive(Debug, Clone)]
pub struct EmbeddingTable<T> {
    /// `[vocab, dim]`; rows absent from the file are glorot-uniform, the
    /// padding row is zero.
    pub table: Tensor<T>,
    /// Rows copied from the file; these are never updated in training.
    pub frozen: Vec<bool>,
    /// Non-reserved vocabulary entries found in the file.
    pub found: usize,
}

impl<T> EmbeddingTable<T> {
    /// Fraction of non-reserved vocabulary entries found in the file.
    pub fn coverage(&self) -> f64 {
        let total = self.frozen.len().saturating_sub(2);
        if total == 0 {
            0.0
        } else {
            self.found as f64 / total as f64
        }
    }
}

/// Reads a text embedding file: one token per line followed by `dim`
/// space-separated decimals. Tokens outside `vocab` are skipped; the first
/// occurrence of a repeated token wins.
pub fn load_embeddings<T: Scalar>(
    path: &Path,
    vocab: &Vocab,
    dim: usize,
    rng: &mut impl Rng,
) -> Result<EmbeddingTable<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut table: Tensor<T> = glorot_uniform(vocab.len(), dim, rng);
    let mut frozen = vec![false; vocab.len()];
    let mut found = 0;
    let format = |line: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        line,
        message,
    };
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values: Vec<f64> = fields
            .map(|f| f.parse::<f64>().map_err(|_| format(n + 1, format!("{f:?} is not a number"))))
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(format(n + 1, format!("expected {dim} values, found {}", values.len())));
        }
        match vocab.get(token) {
            Some(id) if id != PAD && !frozen[id] => {
                for (dst, &v) in table.row_mut(id).iter_mut().zip(&values) {
                    *dst = T::of(v);
                }
                frozen[id] = true;
                if id != super::UNK {
                    found += 1;
                }
            }
            _ => {}
        }
    }
    table.row_mut(PAD).iter_mut().for_each(|v| *v = T::zero());
    Ok(EmbeddingTable { table, frozen, found })
}
