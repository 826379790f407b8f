use rand::Rng;

use super::{Activation, BiLstm, Dense};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{glorot_uniform, Graph, ParamId, ParamStore, Tensor, Var};

/// Zeroes row 0 of a table and marks it frozen.
fn pin_padding_row<T: Scalar>(store: &mut ParamStore<T>, id: ParamId) {
    let p = store.get_mut(id);
    p.value.row_mut(0).iter_mut().for_each(|v| *v = T::zero());
    let rows = p.value.rows();
    let frozen = p.frozen_rows.get_or_insert_with(|| vec![false; rows]);
    frozen[0] = true;
}

/// Word lookup table `|V| × d_w`; row 0 is the padding vector.
#[derive(Debug, Clone)]
pub struct WordEmbedding {
    pub table: ParamId,
    pub dim: usize,
}

impl WordEmbedding {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let table = store.add(name, glorot_uniform(vocab, dim, rng));
        pin_padding_row(store, table);
        WordEmbedding { table, dim }
    }

    /// Installs pretrained vectors. Rows flagged in `frozen` are never
    /// updated; row 0 stays the zero padding row.
    pub fn load<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        table: Tensor<T>,
        frozen: Vec<bool>,
    ) -> Result<()> {
        let p = store.get_mut(self.table);
        if table.shape() != p.value.shape() || frozen.len() != table.rows() {
            return Err(Error::dim(format!(
                "embedding table {:?} does not match {:?}",
                table.shape(),
                p.value.shape()
            )));
        }
        p.value = table;
        p.frozen_rows = Some(frozen);
        pin_padding_row(store, self.table);
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, ids: &[usize]) -> Result<Var> {
        let t = g.param(self.table);
        g.gather_rows(t, ids)
    }
}

/// Character-level word encoder: char embeddings → BiLSTM → final states of
/// both directions → dense projection to `out_dim`.
#[derive(Debug, Clone)]
pub struct CharEncoder {
    pub table: ParamId,
    pub lstm: BiLstm,
    pub projection: Dense,
}

impl CharEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        chars: usize,
        char_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let table = store.add(format!("{name}.table"), glorot_uniform(chars, char_dim, rng));
        pin_padding_row(store, table);
        let lstm = BiLstm::new(store, &format!("{name}.lstm"), char_dim, hidden, rng);
        let projection = Dense::new(
            store,
            &format!("{name}.proj"),
            2 * hidden,
            out_dim,
            Activation::Relu,
            rng,
        );
        CharEncoder {
            table,
            lstm,
            projection,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.projection.out_dim
    }

    /// `[1, 2h]` concatenation of the last forward and last backward states.
    pub fn encode_word<T: Scalar>(&self, g: &mut Graph<'_, T>, char_ids: &[usize]) -> Result<Var> {
        let len = char_ids.iter().take_while(|&&c| c != 0).count();
        if len == 0 {
            return Err(Error::Data("word without characters".into()));
        }
        let table = g.param(self.table);
        let x = g.gather_rows(table, &char_ids[..len])?;
        let mask = vec![true; len];
        let (f, b) = self.lstm.directions(g, x, &mask)?;
        let last_f = g.slice(f, 0, len - 1, len)?;
        let first_b = g.slice(b, 0, 0, 1)?;
        g.concat(&[last_f, first_b], 1)
    }

    /// `[len, out_dim]` representations; masked positions start from zeros.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        words: &[Vec<usize>],
        mask: &[bool],
    ) -> Result<Var> {
        if words.len() != mask.len() {
            return Err(Error::dim("char ids and mask differ in length"));
        }
        let mut rows = Vec::with_capacity(words.len());
        for (chars, &real) in words.iter().zip(mask) {
            if real {
                rows.push(self.encode_word(g, chars)?);
            } else {
                rows.push(g.constant(Tensor::zeros(vec![1, self.lstm.output_dim()])));
            }
        }
        let stacked = g.concat(&rows, 0)?;
        self.projection.forward(g, stacked)
    }
}
