//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node whose parents were created
//! before it, so node order is a topological order and the backward sweep is a
//! single reverse pass. Parameters are borrowed from a [`ParamStore`] without
//! copying; a graph is rebuilt for every forward pass.

use std::borrow::Cow;

use super::lstm::{self, LstmTape};
use super::params::{Gradients, ParamId, ParamStore};
use super::value::{matmul_into, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberately wrong backward rules, used as negative controls for gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    Sigmoid,
    Tanh,
    Relu,
    MatMul,
    Lstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// Right operand repeats along the leading dimensions of the left.
    Right,
    /// Left operand repeats along the leading dimensions of the right.
    Left,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Neg(Var),
    Scale(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Sum { x: Var, axis: usize },
    Mean { x: Var, axis: usize },
    Max { x: Var, argmax: Vec<usize> },
    SumAll(Var),
    Softmax { x: Var, axis: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    MaxOver { parts: Vec<Var>, argmax: Vec<usize> },
    ScaleRows { x: Var, factors: Vec<T> },
    MulConst { x: Var, c: Tensor<T> },
    Lstm(Box<LstmTape<T>>),
    SoftmaxXent { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation record for one forward/backward pass.
pub struct Graph<'a, T: Scalar> {
    store: Option<&'a ParamStore<T>>,
    nodes: Vec<Node<'a, T>>,
    grads: Vec<Option<Tensor<T>>>,
    param_vars: Vec<Option<Var>>,
    fault: Option<Fault>,
    branches: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0100_0000_01b3;

/// `(outer, n, inner)` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn broadcast(a: &[usize], b: &[usize], op: &str) -> Result<(Vec<usize>, Broadcast)> {
    if a == b {
        Ok((a.to_vec(), Broadcast::Same))
    } else if is_suffix(a, b) {
        Ok((a.to_vec(), Broadcast::Right))
    } else if is_suffix(b, a) {
        Ok((b.to_vec(), Broadcast::Left))
    } else {
        Err(Error::dim(format!(
            "{op}: shapes {a:?} and {b:?} are not trailing-dimension compatible"
        )))
    }
}

impl<'a, T: Scalar> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    /// A graph without parameters; inputs come from [`Graph::input`].
    pub fn new() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            grads: Vec::new(),
            param_vars: Vec::new(),
            fault: None,
            branches: FNV_OFFSET,
        }
    }

    pub fn with_params(store: &'a ParamStore<T>) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
            grads: Vec::new(),
            param_vars: vec![None; store.len()],
            fault: None,
            branches: FNV_OFFSET,
        }
    }

    pub fn set_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// Differentiable leaf (its gradient is kept after backward).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(id.0).copied().flatten() {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let p = store.get(id);
        let v = self.push(Cow::Borrowed(&p.value), Op::Param, p.trainable);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Argmax bookkeeping of a [`Graph::max_over`] node: winning part per element.
    pub fn argmax_parts(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.0].op {
            Op::MaxOver { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    // ----- elementwise -----

    fn binary(&mut self, x: Var, y: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, Broadcast)> {
        let a = self.value(x);
        let b = self.value(y);
        let (shape, bc) = broadcast(a.shape(), b.shape(), name)?;
        let (ad, bd) = (a.data(), b.data());
        let n: usize = shape.iter().product();
        let data = match bc {
            Broadcast::Same => ad.iter().zip(bd).map(|(&p, &q)| f(p, q)).collect(),
            Broadcast::Right => (0..n).map(|i| f(ad[i], bd[i % bd.len()])).collect(),
            Broadcast::Left => (0..n).map(|i| f(ad[i % ad.len()], bd[i])).collect(),
        };
        Ok((Tensor::new(shape, data)?, bc))
    }

    pub fn add(&mut self, x: Var, y: Var) -> Result<Var> {
        let (t, bc) = self.binary(x, y, "add", |a, b| a + b)?;
        Ok(self.push_op(t, Op::Add(x, y, bc), &[x, y]))
    }

    pub fn sub(&mut self, x: Var, y: Var) -> Result<Var> {
        let (t, bc) = self.binary(x, y, "sub", |a, b| a - b)?;
        Ok(self.push_op(t, Op::Sub(x, y, bc), &[x, y]))
    }

    pub fn mul(&mut self, x: Var, y: Var) -> Result<Var> {
        let (t, bc) = self.binary(x, y, "mul", |a, b| a * b)?;
        Ok(self.push_op(t, Op::Mul(x, y, bc), &[x, y]))
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let t = self.value(x).map(f);
        self.push_op(t, op, &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Op::Neg(x), |v| -v)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let active: Vec<usize> = self.value(x).data().iter().map(|&v| usize::from(v > T::zero())).collect();
        self.note_branches(&active);
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    fn note_branches(&mut self, choices: &[usize]) {
        for &c in choices {
            self.branches = (self.branches ^ c as u64).wrapping_mul(FNV_PRIME);
        }
    }

    /// Hash of every branch taken so far by non-smooth ops (relu signs,
    /// max and max_over winners). Two forward passes with equal signatures
    /// evaluated the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        self.branches
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    /// Multiplies by a fixed tensor of identical shape (dropout masks).
    pub fn mul_const(&mut self, x: Var, c: Tensor<T>) -> Result<Var> {
        if c.shape() != self.shape(x) {
            return Err(Error::dim(format!(
                "mul_const: shapes {:?} and {:?} differ",
                self.shape(x),
                c.shape()
            )));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(&a, &b)| a * b)
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push_op(t, Op::MulConst { x, c }, &[x]))
    }

    /// Scales row `i` of a matrix by `factors[i]` (row masks).
    pub fn scale_rows(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 2 || v.rows() != factors.len() {
            return Err(Error::dim(format!(
                "scale_rows: {} factors for shape {:?}",
                factors.len(),
                v.shape()
            )));
        }
        let mut t = v.clone();
        for (i, &f) in factors.iter().enumerate() {
            for e in t.row_mut(i) {
                *e = *e * f;
            }
        }
        Ok(self.push_op(t, Op::ScaleRows { x, factors }, &[x]))
    }

    // ----- linear algebra -----

    pub fn matmul(&mut self, x: Var, y: Var) -> Result<Var> {
        let t = self.value(x).matmul(self.value(y))?;
        Ok(self.push_op(t, Op::MatMul(x, y), &[x, y]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        Ok(self.push_op(t, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push_op(t, Op::Reshape(x), &[x]))
    }

    // ----- reductions -----

    fn check_axis(&self, x: Var, axis: usize, op: &str) -> Result<()> {
        let rank = self.value(x).rank();
        if axis >= rank {
            return Err(Error::dim(format!(
                "{op}: axis {axis} out of range for shape {:?}",
                self.shape(x)
            )));
        }
        Ok(())
    }

    fn reduced_shape(&self, x: Var, axis: usize) -> Vec<usize> {
        let mut s = self.shape(x).to_vec();
        s.remove(axis);
        s
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "sum")?;
        let t = self.sum_along(x, axis);
        Ok(self.push_op(t, Op::Sum { x, axis }, &[x]))
    }

    fn sum_along(&self, x: Var, axis: usize) -> Tensor<T> {
        let v = self.value(x);
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let d = v.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + d[base + i];
                }
            }
        }
        Tensor::new(self.reduced_shape(x, axis), out).expect("reduced shape")
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "mean")?;
        let n = T::of(self.shape(x)[axis] as f64);
        let t = self.sum_along(x, axis).map(|v| v / n);
        Ok(self.push_op(t, Op::Mean { x, axis }, &[x]))
    }

    /// Maximum along `axis`; the gradient goes to the lowest-index maximizer.
    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "max")?;
        let v = self.value(x);
        let (outer, n, inner) = split_axis(v.shape(), axis);
        if n == 0 {
            return Err(Error::dim("max over an empty axis"));
        }
        let d = v.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * n * inner + i;
                for k in 1..n {
                    let idx = (o * n + k) * inner + i;
                    if d[idx] > d[best] {
                        best = idx;
                    }
                }
                out.push(d[best]);
                argmax.push(best);
            }
        }
        let t = Tensor::new(self.reduced_shape(x, axis), out)?;
        self.note_branches(&argmax);
        Ok(self.push_op(t, Op::Max { x, argmax }, &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push_op(t, Op::SumAll(x), &[x])
    }

    /// Softmax along `axis`. With a mask (one flag per position on `axis`),
    /// masked positions are excluded and receive exactly zero.
    pub fn softmax(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        self.check_axis(x, axis, "softmax")?;
        let v = self.value(x);
        let (outer, n, inner) = split_axis(v.shape(), axis);
        if let Some(m) = mask {
            if m.len() != n {
                return Err(Error::dim(format!(
                    "softmax: mask of length {} for axis of extent {n}",
                    m.len()
                )));
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::DegenerateSlice { axis });
            }
        }
        let keep = |k: usize| mask.map_or(true, |m| m[k]);
        let d = v.data();
        let mut out = vec![T::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let mut mx = T::neg_infinity();
                for k in (0..n).filter(|&k| keep(k)) {
                    mx = mx.max(d[at(k)]);
                }
                let mut total = T::zero();
                for k in (0..n).filter(|&k| keep(k)) {
                    let e = (d[at(k)] - mx).exp();
                    out[at(k)] = e;
                    total = total + e;
                }
                for k in (0..n).filter(|&k| keep(k)) {
                    out[at(k)] = out[at(k)] / total;
                }
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push_op(t, Op::Softmax { x, axis }, &[x]))
    }

    // ----- structure -----

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        self.check_axis(first, axis, "concat")?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(k, (a, b))| k == axis || a == b);
            if !compatible {
                return Err(Error::dim(format!(
                    "concat along axis {axis}: {base:?} vs {s:?}"
                )));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let pv = self.value(p);
                let chunk = pv.shape()[axis] * inner;
                out.extend_from_slice(&pv.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push_op(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Positions `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check_axis(x, axis, "slice")?;
        let v = self.value(x);
        let (outer, n, inner) = split_axis(v.shape(), axis);
        if start > end || end > n {
            return Err(Error::dim(format!(
                "slice {start}..{end} out of range for axis {axis} of {:?}",
                v.shape()
            )));
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = end - start;
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&v.data()[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push_op(t, Op::Slice { x, axis, start }, &[x]))
    }

    /// Row lookup into a rank-2 table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::dim(format!(
                "gather_rows needs a matrix table, got {:?}",
                tv.shape()
            )));
        }
        let (rows, cols) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Vocabulary { id, size: rows });
            }
            out.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(vec![ids.len(), cols], out)?;
        Ok(self.push_op(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Elementwise maximum over equally shaped tensors. Ties go to the
    /// earliest part; the winner per element is kept for gradient routing.
    pub fn max_over(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("max_over of zero tensors"))?;
        let shape = self.shape(first).to_vec();
        if let Some(&bad) = parts.iter().find(|&&p| self.shape(p) != shape.as_slice()) {
            return Err(Error::dim(format!(
                "max_over: {shape:?} vs {:?}",
                self.shape(bad)
            )));
        }
        let n: usize = shape.iter().product();
        let mut out = self.value(first).data().to_vec();
        let mut argmax = vec![0usize; n];
        for (pi, &p) in parts.iter().enumerate().skip(1) {
            for (e, &v) in self.value(p).data().iter().enumerate() {
                if v > out[e] {
                    out[e] = v;
                    argmax[e] = pi;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        self.note_branches(&argmax);
        Ok(self.push_op(
            t,
            Op::MaxOver {
                parts: parts.to_vec(),
                argmax,
            },
            parts,
        ))
    }

    /// One direction of an LSTM over a sequence.
    ///
    /// `xw` is the input projection `x W + b` (`[len, 4h]`, gate order
    /// input, forget, cell, output); `u` is the recurrent matrix `[h, 4h]`.
    /// Masked steps output zeros and reset the carried state.
    pub fn lstm(&mut self, xw: Var, u: Var, mask: &[bool], reverse: bool) -> Result<Var> {
        let (out, tape) = lstm::forward(self.value(xw), self.value(u), mask, reverse, xw, u)?;
        Ok(self.push_op(out, Op::Lstm(Box::new(tape)), &[xw, u]))
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        if v.rank() != 2 || v.rows() != labels.len() {
            return Err(Error::dim(format!(
                "cross-entropy: logits {:?} for {} labels",
                v.shape(),
                labels.len()
            )));
        }
        let c = v.cols();
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = Vec::with_capacity(v.len());
        let mut loss = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = v.row(r);
            let top = (0..c).fold(0, |best, k| if row[k] > row[best] { k } else { best });
            let mx = row[top];
            // ln Σ exp(z - mx) = ln(1 + rest), rest excluding the maximum
            let rest: T = (0..c).filter(|&k| k != top).map(|k| (row[k] - mx).exp()).sum();
            loss = loss + (mx - row[label]) + rest.ln_1p();
            let total = T::one() + rest;
            probs.extend(row.iter().map(|&z| (z - mx).exp() / total));
        }
        loss = loss / T::of(labels.len() as f64);
        Ok(self.push_op(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    // ----- backward -----

    /// Accumulates d(loss)/d(node) into every differentiable node reachable
    /// from `loss`. Repeated calls add to existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut tmp: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        tmp[loss.0] = Some(Tensor::ones(self.shape(loss).to_vec()));
        for i in (0..=loss.0).rev() {
            let Some(gy) = tmp[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &gy, &mut tmp)?;
            match &mut self.grads[i] {
                Some(g) => g.add_assign(&gy),
                slot @ None => *slot = Some(gy),
            }
        }
        Ok(())
    }

    /// Gradients of every parameter leaf, keyed by parameter id.
    pub fn param_grads(&self) -> Gradients<T> {
        let mut out = Gradients::empty(self.param_vars.len());
        for (i, v) in self.param_vars.iter().enumerate() {
            if let Some(g) = v.and_then(|v| self.grads[v.0].as_ref()) {
                out.accumulate(ParamId(i), g);
            }
        }
        out
    }

    fn faulty(&self, f: Fault) -> T {
        if self.fault == Some(f) {
            T::of(1.5)
        } else {
            T::one()
        }
    }

    fn propagate(&self, i: usize, gy: &Tensor<T>, tmp: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.as_ref();
        let mut acc = |v: Var, g: Tensor<T>| {
            if self.nodes[v.0].requires_grad {
                match &mut tmp[v.0] {
                    Some(e) => e.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        };
        let elementwise = |x: Var, f: &dyn Fn(T, T, T) -> T| -> Tensor<T> {
            // f(x, y, dy)
            let xv = self.value(x);
            let data = xv
                .data()
                .iter()
                .zip(y.data())
                .zip(gy.data())
                .map(|((&a, &b), &d)| f(a, b, d))
                .collect();
            Tensor::new(xv.shape().to_vec(), data).expect("same shape")
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b, bc) => {
                let (ga, gb) = self.binary_grads(*a, *b, *bc, gy, |_, _| (T::one(), T::one()));
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Sub(a, b, bc) => {
                let (ga, gb) = self.binary_grads(*a, *b, *bc, gy, |_, _| (T::one(), -T::one()));
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Mul(a, b, bc) => {
                let (ga, gb) = self.binary_grads(*a, *b, *bc, gy, |p, q| (q, p));
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Neg(x) => acc(*x, gy.map(|d| -d)),
            Op::Scale(x, c) => {
                let c = *c;
                acc(*x, gy.map(|d| d * c))
            }
            Op::Tanh(x) => {
                let k = self.faulty(Fault::Tanh);
                acc(*x, elementwise(*x, &|_, t, d| d * (T::one() - t * t) * k))
            }
            Op::Sigmoid(x) => {
                let k = self.faulty(Fault::Sigmoid);
                acc(*x, elementwise(*x, &|_, s, d| d * s * (T::one() - s) * k))
            }
            Op::Relu(x) => {
                let k = self.faulty(Fault::Relu);
                acc(
                    *x,
                    elementwise(*x, &|a, _, d| if a > T::zero() { d * k } else { T::zero() }),
                )
            }
            Op::Exp(x) => acc(*x, elementwise(*x, &|_, e, d| d * e)),
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, n, p) = (av.rows(), av.cols(), bv.cols());
                let k = self.faulty(Fault::MatMul);
                if self.nodes[a.0].requires_grad {
                    // dA = dY · Bᵀ
                    let bt = bv.transpose()?;
                    let mut ga = vec![T::zero(); m * n];
                    matmul_into(gy.data(), bt.data(), &mut ga, m, p, n);
                    if k != T::one() {
                        ga.iter_mut().for_each(|v| *v = *v * k);
                    }
                    acc(*a, Tensor::new(vec![m, n], ga)?);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ · dY
                    let at = av.transpose()?;
                    let mut gb = vec![T::zero(); n * p];
                    matmul_into(at.data(), gy.data(), &mut gb, n, m, p);
                    acc(*b, Tensor::new(vec![n, p], gb)?);
                }
            }
            Op::Transpose(x) => acc(*x, gy.transpose()?),
            Op::Reshape(x) => acc(*x, gy.clone().reshape(self.shape(*x).to_vec())?),
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let shape = self.shape(*x);
                let (outer, n, inner) = split_axis(shape, *axis);
                let scale = match node.op {
                    Op::Mean { .. } => T::one() / T::of(n as f64),
                    _ => T::one(),
                };
                let mut g = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        for e in 0..inner {
                            g[(o * n + k) * inner + e] = gy.data()[o * inner + e] * scale;
                        }
                    }
                }
                acc(*x, Tensor::new(shape.to_vec(), g)?);
            }
            Op::Max { x, argmax, .. } => {
                let mut g = Tensor::zeros(self.shape(*x).to_vec());
                for (o, &src) in argmax.iter().enumerate() {
                    g.data_mut()[src] = g.data()[src] + gy.data()[o];
                }
                acc(*x, g);
            }
            Op::SumAll(x) => {
                let d = gy.data()[0];
                acc(*x, Tensor::filled(self.shape(*x).to_vec(), d));
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(y.shape(), *axis);
                let (yd, dd) = (y.data(), gy.data());
                let mut g = vec![T::zero(); yd.len()];
                for o in 0..outer {
                    for e in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + e;
                        let dot: T = (0..n).map(|k| yd[at(k)] * dd[at(k)]).sum();
                        for k in 0..n {
                            g[at(k)] = yd[at(k)] * (dd[at(k)] - dot);
                        }
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), g)?);
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_axis(y.shape(), *axis);
                let total = y.shape()[*axis];
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let width = ps[*axis];
                    if self.nodes[p.0].requires_grad {
                        let mut g = Vec::with_capacity(outer * width * inner);
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            g.extend_from_slice(&gy.data()[from..from + width * inner]);
                        }
                        acc(p, Tensor::new(ps, g)?);
                    }
                    offset += width;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = split_axis(&shape, *axis);
                let width = y.shape()[*axis];
                let mut g = Tensor::zeros(shape);
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * width * inner;
                    g.data_mut()[dst..dst + width * inner]
                        .copy_from_slice(&gy.data()[src..src + width * inner]);
                }
                acc(*x, g);
            }
            Op::Gather { table, ids } => {
                let mut g = Tensor::zeros(self.shape(*table).to_vec());
                for (r, &id) in ids.iter().enumerate() {
                    let src = gy.row(r).to_vec();
                    for (d, s) in g.row_mut(id).iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
                acc(*table, g);
            }
            Op::MaxOver { parts, argmax } => {
                for (pi, &p) in parts.iter().enumerate() {
                    if !self.nodes[p.0].requires_grad {
                        continue;
                    }
                    let data = gy
                        .data()
                        .iter()
                        .zip(argmax)
                        .map(|(&d, &w)| if w == pi { d } else { T::zero() })
                        .collect();
                    acc(p, Tensor::new(y.shape().to_vec(), data)?);
                }
            }
            Op::ScaleRows { x, factors } => {
                let mut g = gy.clone();
                for (r, &f) in factors.iter().enumerate() {
                    for e in g.row_mut(r) {
                        *e = *e * f;
                    }
                }
                acc(*x, g);
            }
            Op::MulConst { x, c } => {
                let data = gy.data().iter().zip(c.data()).map(|(&d, &m)| d * m).collect();
                acc(*x, Tensor::new(gy.shape().to_vec(), data)?);
            }
            Op::Lstm(tape) => {
                let (mut gxw, gu) = lstm::backward(tape, self.value(tape.u), y, gy);
                if self.fault == Some(Fault::Lstm) {
                    gxw.data_mut().iter_mut().for_each(|v| *v = *v * T::of(1.5));
                }
                acc(tape.xw, gxw);
                acc(tape.u, gu);
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let scale = gy.data()[0] / T::of(labels.len() as f64);
                let mut g = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    g[r * c + l] = g[r * c + l] - T::one();
                }
                g.iter_mut().for_each(|v| *v = *v * scale);
                acc(*logits, Tensor::new(self.shape(*logits).to_vec(), g)?);
            }
        }
        Ok(())
    }

    /// Gradients of a broadcasting binary op; `partials(a, b)` gives (∂/∂a, ∂/∂b).
    fn binary_grads(
        &self,
        a: Var,
        b: Var,
        bc: Broadcast,
        gy: &Tensor<T>,
        partials: impl Fn(T, T) -> (T, T),
    ) -> (Tensor<T>, Tensor<T>) {
        let av = self.value(a);
        let bv = self.value(b);
        let (ad, bd) = (av.data(), bv.data());
        let mut ga = vec![T::zero(); ad.len()];
        let mut gb = vec![T::zero(); bd.len()];
        for (i, &d) in gy.data().iter().enumerate() {
            let (ia, ib) = match bc {
                Broadcast::Same => (i, i),
                Broadcast::Right => (i, i % bd.len()),
                Broadcast::Left => (i % ad.len(), i),
            };
            let (pa, pb) = partials(ad[ia], bd[ib]);
            ga[ia] = ga[ia] + d * pa;
            gb[ib] = gb[ib] + d * pb;
        }
        (
            Tensor::new(av.shape().to_vec(), ga).expect("shape"),
            Tensor::new(bv.shape().to_vec(), gb).expect("shape"),
        )
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}
