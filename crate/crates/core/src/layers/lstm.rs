use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamId, ParamStore, Var};

/// Parameters of one LSTM direction. Gate order in the `4h` axis is
/// input, forget, cell, output.
#[derive(Debug, Clone)]
pub struct LstmDirection {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
}

impl LstmDirection {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        LstmDirection {
            w: store.add_glorot(format!("{name}.w"), input_dim, 4 * hidden, rng),
            u: store.add_glorot(format!("{name}.u"), hidden, 4 * hidden, rng),
            b: store.add_zeros(format!("{name}.b"), vec![4 * hidden]),
        }
    }

    fn run<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, mask: &[bool], reverse: bool) -> Result<Var> {
        let w = g.param(self.w);
        let u = g.param(self.u);
        let b = g.param(self.b);
        let xw = g.matmul(x, w)?;
        let xw = g.add(xw, b)?;
        g.lstm(xw, u, mask, reverse)
    }
}

/// Right padding only: the mask must be a run of `true` followed by `false`.
pub fn check_prefix_mask(mask: &[bool]) -> Result<()> {
    let real = mask.iter().take_while(|&&m| m).count();
    if mask[real..].iter().any(|&m| m) {
        return Err(Error::Data(format!(
            "mask {:?} is not a contiguous prefix",
            mask.iter().map(|&m| m as u8).collect::<Vec<_>>()
        )));
    }
    Ok(())
}

/// Bidirectional LSTM; output rows are `[forward ‖ backward]`, width `2h`.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub forward: LstmDirection,
    pub backward: LstmDirection,
    pub input_dim: usize,
    pub hidden: usize,
}

impl BiLstm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        BiLstm {
            forward: LstmDirection::new(store, &format!("{name}.fwd"), input_dim, hidden, rng),
            backward: LstmDirection::new(store, &format!("{name}.bwd"), input_dim, hidden, rng),
            input_dim,
            hidden,
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    /// Separate `[len, h]` outputs of the two directions.
    pub fn directions<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        mask: &[bool],
    ) -> Result<(Var, Var)> {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::dim(format!(
                "BiLSTM expects [len, {}], got {shape:?}",
                self.input_dim
            )));
        }
        check_prefix_mask(mask)?;
        let f = self.forward.run(g, x, mask, false)?;
        let b = self.backward.run(g, x, mask, true)?;
        Ok((f, b))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, mask: &[bool]) -> Result<Var> {
        let (f, b) = self.directions(g, x, mask)?;
        g.concat(&[f, b], 1)
    }
}

/// BiLSTM layers applied in sequence (the aggregation encoder).
#[derive(Debug, Clone)]
pub struct StackedBiLstm {
    pub layers: Vec<BiLstm>,
}

impl StackedBiLstm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input_dim: usize,
        hidden: usize,
        depth: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = (0..depth)
            .map(|i| {
                let d = if i == 0 { input_dim } else { 2 * hidden };
                BiLstm::new(store, &format!("{name}.{i}"), d, hidden, rng)
            })
            .collect();
        StackedBiLstm { layers }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, mut x: Var, mask: &[bool]) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(g, x, mask)?;
        }
        Ok(x)
    }
}
