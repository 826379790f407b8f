//! Reusable network layers.
//!
//! Layers only hold [`ParamId`]s and dimensions; values live in a
//! [`ParamStore`] and are bound into a [`Graph`] on every forward pass.

mod embedding;
mod lstm;

pub use embedding::{CharEncoder, WordEmbedding};
pub use lstm::{check_prefix_mask, BiLstm, LstmDirection, StackedBiLstm};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply<T: Scalar>(self, g: &mut Graph<'_, T>, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }
}

/// Fully connected layer `act(x W + b)` on `[n, in]` inputs.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl Dense {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add_glorot(format!("{name}.w"), in_dim, out_dim, rng);
        let b = store.add_zeros(format!("{name}.b"), vec![out_dim]);
        Dense {
            w,
            b,
            in_dim,
            out_dim,
            activation,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::dim(format!(
                "dense layer expects [n, {}], got {shape:?}",
                self.in_dim
            )));
        }
        let w = g.param(self.w);
        let b = g.param(self.b);
        let xw = g.matmul(x, w)?;
        let y = g.add(xw, b)?;
        Ok(self.activation.apply(g, y))
    }
}

/// Transform/carry gated layer: `y = t ⊙ relu(x W_h + b_h) + (1 − t) ⊙ x`,
/// `t = σ(x W_t + b_t)`.
#[derive(Debug, Clone)]
pub struct HighwayLayer {
    pub transform: Dense,
    pub gate: Dense,
}

/// Stack of width-preserving highway layers.
#[derive(Debug, Clone)]
pub struct Highway {
    pub layers: Vec<HighwayLayer>,
    pub width: usize,
}

/// Initial carry-gate bias; negative values favour passing the input through.
pub const HIGHWAY_GATE_BIAS: f64 = -1.0;

impl Highway {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        depth: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = (0..depth)
            .map(|i| {
                let transform = Dense::new(
                    store,
                    &format!("{name}.{i}.transform"),
                    width,
                    width,
                    Activation::Relu,
                    rng,
                );
                let gate = Dense::new(
                    store,
                    &format!("{name}.{i}.gate"),
                    width,
                    width,
                    Activation::Sigmoid,
                    rng,
                );
                store.get_mut(gate.b).value = Tensor::filled(vec![width], T::of(HIGHWAY_GATE_BIAS));
                HighwayLayer { transform, gate }
            })
            .collect();
        Highway { layers, width }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, mut x: Var) -> Result<Var> {
        if g.shape(x).last() != Some(&self.width) {
            return Err(Error::dim(format!(
                "highway of width {} applied to {:?}",
                self.width,
                g.shape(x)
            )));
        }
        for layer in &self.layers {
            let h = layer.transform.forward(g, x)?;
            let t = layer.gate.forward(g, x)?;
            let delta = g.sub(h, x)?;
            let gated = g.mul(t, delta)?;
            x = g.add(x, gated)?;
        }
        Ok(x)
    }
}

/// Inverted dropout. Passing `None` for the generator selects evaluation
/// mode, which is the identity.
pub fn dropout<T: Scalar, R: Rng>(
    g: &mut Graph<'_, T>,
    x: Var,
    rate: f64,
    rng: Option<&mut R>,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config("dropout", format!("rate {rate} outside [0, 1)")));
    }
    let Some(rng) = rng else { return Ok(x) };
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = T::of(1.0 / (1.0 - rate));
    let shape = g.shape(x).to_vec();
    let n = shape.iter().product();
    let mask = (0..n)
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect();
    g.mul_const(x, Tensor::new(shape, mask)?)
}
