//! Compare-align-factorize blocks and multi-level attention refinement.
//!
//! A CAFE block soft-aligns two sequences, builds concatenation,
//! multiplication and subtraction matching vectors per position, and
//! compresses each one to a scalar with a factorization machine. Three more
//! scalars come from the same procedure applied between a sequence and itself.
//! The block appends those six scalars to its input, so width `d` becomes
//! `d + 6`. [`MarEncoder`] places a block after every stacked BiLSTM layer
//! except the last.

use rand::Rng;

use crate::csra::StackedStates;
use crate::error::{Error, Result};
use crate::layers::{dropout, Activation, BiLstm, Dense};
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamId, ParamStore, Var};

/// Number of scalar features a block appends to each position.
pub const CAFE_FEATURES: usize = 6;

/// `M(x) = w0 + Σ wᵢxᵢ + Σ_{i<j} ⟨vᵢ, vⱼ⟩ xᵢxⱼ` applied to each row of `[len, n]`.
#[derive(Debug, Clone)]
pub struct FactorizationMachine {
    pub w0: ParamId,
    pub w: ParamId,
    pub v: ParamId,
    pub n: usize,
    pub factors: usize,
}

impl FactorizationMachine {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        n: usize,
        factors: usize,
        rng: &mut impl Rng,
    ) -> Self {
        FactorizationMachine {
            w0: store.add_zeros(format!("{name}.w0"), vec![1]),
            w: store.add_glorot(format!("{name}.w"), n, 1, rng),
            v: store.add_glorot(format!("{name}.v"), n, factors, rng),
            n,
            factors,
        }
    }

    /// `[len, 1]` scores. The pairwise term uses
    /// `½ Σ_f ((Σᵢ v_if xᵢ)² − Σᵢ v_if² xᵢ²)`, linear in `n · factors`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != self.n {
            return Err(Error::dim(format!(
                "factorization machine over {} features applied to {shape:?}",
                self.n
            )));
        }
        let rows = shape[0];
        let w0 = g.param(self.w0);
        let w = g.param(self.w);
        let v = g.param(self.v);
        let linear = g.matmul(x, w)?;
        let linear = g.add(linear, w0)?;
        let xv = g.matmul(x, v)?;
        let xv2 = g.square(xv)?;
        let x2 = g.square(x)?;
        let v2 = g.square(v)?;
        let x2v2 = g.matmul(x2, v2)?;
        let diff = g.sub(xv2, x2v2)?;
        let pair = g.sum(diff, 1)?;
        let pair = g.scale(pair, T::of(0.5));
        let pair = g.reshape(pair, vec![rows, 1])?;
        g.add(linear, pair)
    }

    /// Scalar value for a single feature vector `[n]` or `[1, n]`.
    pub fn eval<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let n = g.value(x).len();
        let row = g.reshape(x, vec![1, n])?;
        let y = self.forward(g, row)?;
        g.reshape(y, Vec::new())
    }
}

/// Alignment scores `E_ij = F(a_i) · F(b_j)` with `F` a dense relu layer.
pub fn score_align<T: Scalar>(g: &mut Graph<'_, T>, f: &Dense, a: Var, b: Var) -> Result<Var> {
    let (wa, wb) = (g.shape(a).last().copied(), g.shape(b).last().copied());
    if wa != wb {
        return Err(Error::dim(format!(
            "alignment of widths {:?} and {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    let fa = f.forward(g, a)?;
    let fb = f.forward(g, b)?;
    let fbt = g.transpose(fb)?;
    g.matmul(fa, fbt)
}

/// Softmax-normalized soft alignment driven by scores `e` (`[len_a, len_b]`).
///
/// Returns `(a_aligned, b_aligned)`: `a_aligned` (`[len_b, d]`) summarizes
/// `a` for every position of `b` (normalized over `a`'s positions), and
/// `b_aligned` (`[len_a, d]`) summarizes `b` for every position of `a`.
pub fn soft_align<T: Scalar>(
    g: &mut Graph<'_, T>,
    e: Var,
    a: Var,
    b: Var,
    mask_a: &[bool],
    mask_b: &[bool],
) -> Result<(Var, Var)> {
    let shape = g.shape(e).to_vec();
    if shape != [g.shape(a)[0], g.shape(b)[0]] {
        return Err(Error::dim(format!(
            "scores {shape:?} do not match sequences {:?} and {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    let over_b = g.softmax(e, 1, Some(mask_b))?;
    let b_aligned = g.matmul(over_b, b)?;
    let over_a = g.softmax(e, 0, Some(mask_a))?;
    let over_a_t = g.transpose(over_a)?;
    let a_aligned = g.matmul(over_a_t, a)?;
    Ok((a_aligned, b_aligned))
}

/// Three FMs over the concatenation, product and difference matching vectors.
#[derive(Debug, Clone)]
pub struct MatchingFms {
    pub concat: FactorizationMachine,
    pub multiply: FactorizationMachine,
    pub subtract: FactorizationMachine,
}

impl MatchingFms {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, factors: usize, rng: &mut impl Rng) -> Self {
        MatchingFms {
            concat: FactorizationMachine::new(store, &format!("{name}.concat"), 2 * d, factors, rng),
            multiply: FactorizationMachine::new(store, &format!("{name}.mul"), d, factors, rng),
            subtract: FactorizationMachine::new(store, &format!("{name}.sub"), d, factors, rng),
        }
    }

    /// `[len, 3]` features of `aligned` against `x`: FMs of
    /// `[aligned; x]`, `aligned ⊙ x` and `aligned − x`.
    pub fn features<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, aligned: Var) -> Result<Var> {
        let cat = g.concat(&[aligned, x], 1)?;
        let mul = g.mul(aligned, x)?;
        let sub = g.sub(aligned, x)?;
        let fc = self.concat.forward(g, cat)?;
        let fm = self.multiply.forward(g, mul)?;
        let fs = self.subtract.forward(g, sub)?;
        g.concat(&[fc, fm, fs], 1)
    }
}

/// One CAFE block for sequences of width `d`.
#[derive(Debug, Clone)]
pub struct CafeBlock {
    pub width: usize,
    pub inter_align: Dense,
    pub intra_align: Dense,
    pub inter: MatchingFms,
    pub intra: MatchingFms,
}

impl CafeBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        factors: usize,
        rng: &mut impl Rng,
    ) -> Self {
        CafeBlock {
            width,
            inter_align: Dense::new(store, &format!("{name}.inter.align"), width, width, Activation::Relu, rng),
            intra_align: Dense::new(store, &format!("{name}.intra.align"), width, width, Activation::Relu, rng),
            inter: MatchingFms::new(store, &format!("{name}.inter"), width, factors, rng),
            intra: MatchingFms::new(store, &format!("{name}.intra"), width, factors, rng),
        }
    }

    pub fn output_width(&self) -> usize {
        self.width + CAFE_FEATURES
    }

    /// Inter-attention features for both sides: `([len_a, 3], [len_b, 3])`.
    pub fn inter_features<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        a: Var,
        b: Var,
        mask_a: &[bool],
        mask_b: &[bool],
    ) -> Result<(Var, Var)> {
        let e = score_align(g, &self.inter_align, a, b)?;
        let (a_aligned, b_aligned) = soft_align(g, e, a, b, mask_a, mask_b)?;
        let fa = self.inter.features(g, a, b_aligned)?;
        let fb = self.inter.features(g, b, a_aligned)?;
        Ok((fa, fb))
    }

    /// Intra-attention features `[len, 3]` of a sequence aligned against itself.
    pub fn intra_features<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, mask: &[bool]) -> Result<Var> {
        let e = score_align(g, &self.intra_align, x, x)?;
        let weights = g.softmax(e, 1, Some(mask))?;
        let aligned = g.matmul(weights, x)?;
        self.intra.features(g, x, aligned)
    }

    /// `([len_a, d + 6], [len_b, d + 6])`: input columns first, then three
    /// inter- and three intra-attention features.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        a: Var,
        b: Var,
        mask_a: &[bool],
        mask_b: &[bool],
    ) -> Result<(Var, Var)> {
        for x in [a, b] {
            if g.shape(x).len() != 2 || g.shape(x)[1] != self.width {
                return Err(Error::dim(format!(
                    "CAFE block of width {} applied to {:?}",
                    self.width,
                    g.shape(x)
                )));
            }
        }
        let (inter_a, inter_b) = self.inter_features(g, a, b, mask_a, mask_b)?;
        let intra_a = self.intra_features(g, a, mask_a)?;
        let intra_b = self.intra_features(g, b, mask_b)?;
        let out_a = g.concat(&[a, inter_a, intra_a], 1)?;
        let out_b = g.concat(&[b, inter_b, intra_b], 1)?;
        Ok((out_a, out_b))
    }
}

/// Stacked BiLSTM encoder with optional CAFE refinement between layers.
#[derive(Debug, Clone)]
pub struct MarEncoder {
    pub layers: Vec<BiLstm>,
    /// `blocks[i]` follows `layers[i]`; empty when refinement is disabled.
    pub blocks: Vec<CafeBlock>,
}

impl MarEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input_dim: usize,
        hidden: usize,
        depth: usize,
        refine: bool,
        factors: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if depth < 1 {
            return Err(Error::config("stack_depth", "must be at least 1"));
        }
        let mut layers = Vec::with_capacity(depth);
        let mut blocks = Vec::new();
        let mut width = input_dim;
        for i in 0..depth {
            layers.push(BiLstm::new(store, &format!("{name}.{i}"), width, hidden, rng));
            width = 2 * hidden;
            if refine && i + 1 < depth {
                let block = CafeBlock::new(store, &format!("cafe.{i}"), width, factors, rng);
                width = block.output_width();
                blocks.push(block);
            }
        }
        Ok(MarEncoder { layers, blocks })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Runs both sequences through the shared stack, recording every
    /// BiLSTM output. `dropout_rng` of `None` means evaluation mode.
    pub fn encode<T: Scalar, R: Rng>(
        &self,
        g: &mut Graph<'_, T>,
        mut a: Var,
        mut b: Var,
        mask_a: &[bool],
        mask_b: &[bool],
        dropout_rate: f64,
        mut dropout_rng: Option<&mut R>,
    ) -> Result<(StackedStates, StackedStates)> {
        let mut states_a = Vec::with_capacity(self.depth());
        let mut states_b = Vec::with_capacity(self.depth());
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                a = dropout(g, a, dropout_rate, dropout_rng.as_deref_mut())?;
                b = dropout(g, b, dropout_rate, dropout_rng.as_deref_mut())?;
            }
            let ha = layer.forward(g, a, mask_a)?;
            let hb = layer.forward(g, b, mask_b)?;
            states_a.push(ha);
            states_b.push(hb);
            match self.blocks.get(i) {
                Some(block) => (a, b) = block.forward(g, ha, hb, mask_a, mask_b)?,
                None => (a, b) = (ha, hb),
            }
        }
        Ok((
            StackedStates::new(states_a, mask_a.to_vec()),
            StackedStates::new(states_b, mask_b.to_vec()),
        ))
    }
}
