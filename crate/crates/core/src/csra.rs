//! Co-stack residual affinity and the matching/aggregation layers after it.
//!
//! Word-pair affinity is taken over the whole feature hierarchy: for every
//! pair of stacked layers `(p, q)` the dot product `a_pi · b_qj` is a
//! candidate, and `s_ij` is the largest of the `k²` candidates. The
//! concatenated stacks are then soft-aligned in both directions using `S`,
//! compared per position, aggregated by a BiLSTM and sum-pooled.

use std::io::Write;

use rand::Rng;

use crate::cafe::soft_align;
use crate::error::{Error, Result};
use crate::layers::StackedBiLstm;
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamStore, Var};

/// Per-layer BiLSTM outputs of one sequence, all `[len, 2h]`.
#[derive(Debug, Clone)]
pub struct StackedStates {
    pub layers: Vec<Var>,
    pub mask: Vec<bool>,
}

impl StackedStates {
    pub fn new(layers: Vec<Var>, mask: Vec<bool>) -> Self {
        StackedStates { layers, mask }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn last(&self) -> Var {
        *self.layers.last().expect("empty stack")
    }
}

/// Affinity scores together with the winning layer pair of every cell.
#[derive(Debug, Clone)]
pub struct AffinityMatrix {
    pub scores: Var,
    /// `(p, q)` per cell in row-major order.
    pub pairs: Vec<(usize, usize)>,
    pub rows: usize,
    pub cols: usize,
}

fn check_stacks<T: Scalar>(g: &Graph<'_, T>, a: &StackedStates, b: &StackedStates) -> Result<usize> {
    let (Some(&a0), Some(&b0)) = (a.layers.first(), b.layers.first()) else {
        return Err(Error::dim("co-stack affinity of an empty stack"));
    };
    let width = g.shape(a0)[1];
    let consistent = |s: &StackedStates| {
        let rows = g.shape(s.layers[0])[0];
        s.layers.iter().all(|&l| g.shape(l) == [rows, width])
    };
    if g.shape(b0)[1] != width || !consistent(a) || !consistent(b) {
        return Err(Error::dim(format!(
            "stacked layer widths differ: {:?} vs {:?}",
            g.shape(a0),
            g.shape(b0)
        )));
    }
    Ok(width)
}

/// `s_ij = max_{p,q} a_pi · b_qj` over every layer pair; ties go to the
/// lexicographically first `(p, q)`, which also receives the gradient.
pub fn costack_affinity<T: Scalar>(
    g: &mut Graph<'_, T>,
    a: &StackedStates,
    b: &StackedStates,
) -> Result<AffinityMatrix> {
    check_stacks(g, a, b)?;
    let kb = b.depth();
    let mut candidates = Vec::with_capacity(a.depth() * kb);
    let transposed: Vec<Var> = b
        .layers
        .iter()
        .map(|&l| g.transpose(l))
        .collect::<Result<_>>()?;
    for &ap in &a.layers {
        for &bq in &transposed {
            candidates.push(g.matmul(ap, bq)?);
        }
    }
    let scores = g.max_over(&candidates)?;
    let pairs = g
        .argmax_parts(scores)
        .expect("max_over node")
        .iter()
        .map(|&w| (w / kb, w % kb))
        .collect();
    let shape = g.shape(scores);
    Ok(AffinityMatrix {
        scores,
        pairs,
        rows: shape[0],
        cols: shape[1],
    })
}

/// Plain last-layer affinity `s_ij = a_i · b_j` (the affinity ablation).
pub fn last_layer_affinity<T: Scalar>(
    g: &mut Graph<'_, T>,
    a: &StackedStates,
    b: &StackedStates,
) -> Result<AffinityMatrix> {
    check_stacks(g, a, b)?;
    let bt = g.transpose(b.last())?;
    let scores = g.matmul(a.last(), bt)?;
    let shape = g.shape(scores);
    let (rows, cols) = (shape[0], shape[1]);
    let pair = (a.depth() - 1, b.depth() - 1);
    Ok(AffinityMatrix {
        scores,
        pairs: vec![pair; rows * cols],
        rows,
        cols,
    })
}

/// `[len, k·2h]` per-position concatenation of all layers, in layer order.
pub fn concat_stack<T: Scalar>(g: &mut Graph<'_, T>, s: &StackedStates) -> Result<Var> {
    if s.layers.is_empty() {
        return Err(Error::dim("concatenation of an empty stack"));
    }
    if s.layers.len() == 1 {
        return Ok(s.layers[0]);
    }
    g.concat(&s.layers, 1)
}

/// `(b̄, ā)`: `b̄` (`[len_a, kd]`) attends over `b_cat` for each position of
/// `a`; `ā` (`[len_b, kd]`) attends over `a_cat` for each position of `b`.
pub fn bidir_align<T: Scalar>(
    g: &mut Graph<'_, T>,
    a_cat: Var,
    b_cat: Var,
    affinity: &AffinityMatrix,
    mask_a: &[bool],
    mask_b: &[bool],
) -> Result<(Var, Var)> {
    let (a_bar, b_bar) = soft_align(g, affinity.scores, a_cat, b_cat, mask_a, mask_b)?;
    Ok((b_bar, a_bar))
}

/// `[aligned − x, aligned ⊙ x, aligned, x]`, width `4 · kd`.
pub fn matching_vector<T: Scalar>(g: &mut Graph<'_, T>, x: Var, aligned: Var) -> Result<Var> {
    if g.shape(x) != g.shape(aligned) {
        return Err(Error::dim(format!(
            "matching {:?} against aligned {:?}",
            g.shape(x),
            g.shape(aligned)
        )));
    }
    let sub = g.sub(aligned, x)?;
    let mul = g.mul(aligned, x)?;
    g.concat(&[sub, mul, aligned, x], 1)
}

/// Masked sum over positions of both aggregated sequences: `[1, 2w]`.
pub fn pool_features<T: Scalar>(
    g: &mut Graph<'_, T>,
    a: Var,
    b: Var,
    mask_a: &[bool],
    mask_b: &[bool],
) -> Result<Var> {
    let pool = |g: &mut Graph<'_, T>, x: Var, mask: &[bool]| -> Result<Var> {
        let factors = mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
        let kept = g.scale_rows(x, factors)?;
        g.sum(kept, 0)
    };
    let za = pool(g, a, mask_a)?;
    let zb = pool(g, b, mask_b)?;
    let z = g.concat(&[za, zb], 0)?;
    let width = g.shape(z)[0];
    g.reshape(z, vec![1, width])
}

/// Affinity → alignment → matching → aggregation → pooling.
#[derive(Debug, Clone)]
pub struct CoStackMatcher {
    pub aggregator: StackedBiLstm,
    /// When false, affinity comes from the last layer only; alignment still
    /// reads the concatenated stacks.
    pub use_csra: bool,
    pub stack_width: usize,
}

/// Intermediate values of one matcher pass, kept for inspection.
#[derive(Debug, Clone)]
pub struct MatchOutput {
    pub z: Var,
    pub affinity: AffinityMatrix,
}

impl CoStackMatcher {
    /// `stack_width` is `k · 2h`, the width of a concatenated stack.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        stack_width: usize,
        agg_hidden: usize,
        agg_depth: usize,
        use_csra: bool,
        rng: &mut impl Rng,
    ) -> Self {
        CoStackMatcher {
            aggregator: StackedBiLstm::new(store, "agg", 4 * stack_width, agg_hidden, agg_depth, rng),
            use_csra,
            stack_width,
        }
    }

    pub fn feature_width(&self) -> usize {
        2 * self.aggregator.layers.last().map_or(0, |l| l.output_dim())
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        a: &StackedStates,
        b: &StackedStates,
    ) -> Result<MatchOutput> {
        let affinity = if self.use_csra {
            costack_affinity(g, a, b)?
        } else {
            last_layer_affinity(g, a, b)?
        };
        let a_cat = concat_stack(g, a)?;
        let b_cat = concat_stack(g, b)?;
        let (b_bar, a_bar) = bidir_align(g, a_cat, b_cat, &affinity, &a.mask, &b.mask)?;
        let ma = matching_vector(g, a_cat, b_bar)?;
        let mb = matching_vector(g, b_cat, a_bar)?;
        let agg_a = self.aggregator.forward(g, ma, &a.mask)?;
        let agg_b = self.aggregator.forward(g, mb, &b.mask)?;
        let z = pool_features(g, agg_a, agg_b, &a.mask, &b.mask)?;
        Ok(MatchOutput { z, affinity })
    }
}

/// Writes `S` and the winning layer pairs as tab-separated row-major
/// matrices. Masked cells are written as `-inf`.
pub fn write_affinity_dump<T: Scalar>(
    out: &mut impl Write,
    g: &Graph<'_, T>,
    affinity: &AffinityMatrix,
    mask_a: &[bool],
    mask_b: &[bool],
) -> std::io::Result<()> {
    let s = g.value(affinity.scores);
    writeln!(out, "# scores {}x{}", affinity.rows, affinity.cols)?;
    for i in 0..affinity.rows {
        let row: Vec<String> = (0..affinity.cols)
            .map(|j| {
                if mask_a[i] && mask_b[j] {
                    format!("{}", s.at(i, j))
                } else {
                    "-inf".to_string()
                }
            })
            .collect();
        writeln!(out, "{}", row.join("\t"))?;
    }
    writeln!(out, "# argmax_pq {}x{}", affinity.rows, affinity.cols)?;
    for i in 0..affinity.rows {
        let row: Vec<String> = (0..affinity.cols)
            .map(|j| {
                let (p, q) = affinity.pairs[i * affinity.cols + j];
                format!("{p},{q}")
            })
            .collect();
        writeln!(out, "{}", row.join("\t"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
