//! Fused single-direction LSTM recurrence with hand-written BPTT.

use super::graph::{sigmoid, Var};
use super::value::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug)]
pub(crate) struct LstmTape<T> {
    pub xw: Var,
    pub u: Var,
    mask: Vec<bool>,
    reverse: bool,
    hidden: usize,
    /// Activated gates `[i, f, g, o]` per step, `[len, 4h]`.
    gates: Vec<T>,
    /// Cell state per step, `[len, h]`.
    cells: Vec<T>,
    /// Step whose state fed this one, if any.
    prev: Vec<Option<usize>>,
}

fn order(len: usize, reverse: bool) -> Box<dyn Iterator<Item = usize>> {
    if reverse {
        Box::new((0..len).rev())
    } else {
        Box::new(0..len)
    }
}

pub(crate) fn forward<T: Scalar>(
    xw: &Tensor<T>,
    u: &Tensor<T>,
    mask: &[bool],
    reverse: bool,
    xw_var: Var,
    u_var: Var,
) -> Result<(Tensor<T>, LstmTape<T>)> {
    if u.rank() != 2 || u.cols() != 4 * u.rows() {
        return Err(Error::dim(format!(
            "lstm: recurrent matrix must be [h, 4h], got {:?}",
            u.shape()
        )));
    }
    let h = u.rows();
    if xw.rank() != 2 || xw.cols() != 4 * h {
        return Err(Error::dim(format!(
            "lstm: input projection must be [len, {}], got {:?}",
            4 * h,
            xw.shape()
        )));
    }
    let len = xw.rows();
    if mask.len() != len {
        return Err(Error::dim(format!(
            "lstm: mask of length {} for sequence of length {len}",
            mask.len()
        )));
    }
    let ud = u.data();
    let mut out = vec![T::zero(); len * h];
    let mut gates = vec![T::zero(); len * 4 * h];
    let mut cells = vec![T::zero(); len * h];
    let mut prev = vec![None; len];
    let mut last: Option<usize> = None;
    let zeros = vec![T::zero(); h];
    let mut z = vec![T::zero(); 4 * h];
    for t in order(len, reverse) {
        if !mask[t] {
            last = None;
            continue;
        }
        let (h_prev, c_prev) = match last {
            Some(p) => (&out[p * h..(p + 1) * h], &cells[p * h..(p + 1) * h]),
            None => (&zeros[..], &zeros[..]),
        };
        z.copy_from_slice(xw.row(t));
        for (r, &hv) in h_prev.iter().enumerate() {
            if hv == T::zero() {
                continue;
            }
            for (zc, &w) in z.iter_mut().zip(&ud[r * 4 * h..(r + 1) * 4 * h]) {
                *zc = *zc + hv * w;
            }
        }
        let mut c_new = vec![T::zero(); h];
        let mut h_new = vec![T::zero(); h];
        let gt = &mut gates[t * 4 * h..(t + 1) * 4 * h];
        for k in 0..h {
            let i = sigmoid(z[k]);
            let f = sigmoid(z[h + k]);
            let g = z[2 * h + k].tanh();
            let o = sigmoid(z[3 * h + k]);
            gt[k] = i;
            gt[h + k] = f;
            gt[2 * h + k] = g;
            gt[3 * h + k] = o;
            c_new[k] = f * c_prev[k] + i * g;
            h_new[k] = o * c_new[k].tanh();
        }
        cells[t * h..(t + 1) * h].copy_from_slice(&c_new);
        out[t * h..(t + 1) * h].copy_from_slice(&h_new);
        prev[t] = last;
        last = Some(t);
    }
    let tape = LstmTape {
        xw: xw_var,
        u: u_var,
        mask: mask.to_vec(),
        reverse,
        hidden: h,
        gates,
        cells,
        prev,
    };
    Ok((Tensor::new(vec![len, h], out)?, tape))
}

/// Returns `(d xw, d u)` given the recorded forward and `d out`.
pub(crate) fn backward<T: Scalar>(
    tape: &LstmTape<T>,
    u: &Tensor<T>,
    out: &Tensor<T>,
    d_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let h = tape.hidden;
    let len = tape.mask.len();
    let ud = u.data();
    let od = out.data();
    let mut dxw = vec![T::zero(); len * 4 * h];
    let mut du = vec![T::zero(); h * 4 * h];
    let mut dh_next = vec![T::zero(); h];
    let mut dc_next = vec![T::zero(); h];
    let steps: Vec<usize> = order(len, tape.reverse).collect();
    for &t in steps.iter().rev() {
        if !tape.mask[t] {
            dh_next.iter_mut().for_each(|v| *v = T::zero());
            dc_next.iter_mut().for_each(|v| *v = T::zero());
            continue;
        }
        let gt = &tape.gates[t * 4 * h..(t + 1) * 4 * h];
        let ct = &tape.cells[t * h..(t + 1) * h];
        let prev = tape.prev[t];
        let dz = &mut dxw[t * 4 * h..(t + 1) * 4 * h];
        for k in 0..h {
            let (i, f, g, o) = (gt[k], gt[h + k], gt[2 * h + k], gt[3 * h + k]);
            let tc = ct[k].tanh();
            let dh = d_out.data()[t * h + k] + dh_next[k];
            let d_o = dh * tc;
            let dc = dc_next[k] + dh * o * (T::one() - tc * tc);
            let c_prev = prev.map_or(T::zero(), |p| tape.cells[p * h + k]);
            dz[k] = dc * g * i * (T::one() - i);
            dz[h + k] = dc * c_prev * f * (T::one() - f);
            dz[2 * h + k] = dc * i * (T::one() - g * g);
            dz[3 * h + k] = d_o * o * (T::one() - o);
            dc_next[k] = dc * f;
        }
        // dU += h_prevᵀ dz ; dh_prev = U dz
        match prev {
            Some(p) => {
                let h_prev = &od[p * h..(p + 1) * h];
                for r in 0..h {
                    let urow = &ud[r * 4 * h..(r + 1) * 4 * h];
                    let durow = &mut du[r * 4 * h..(r + 1) * 4 * h];
                    let mut acc = T::zero();
                    for c in 0..4 * h {
                        durow[c] = durow[c] + h_prev[r] * dz[c];
                        acc = acc + urow[c] * dz[c];
                    }
                    dh_next[r] = acc;
                }
            }
            None => {
                dh_next.iter_mut().for_each(|v| *v = T::zero());
                dc_next.iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }
    (
        Tensor::new(vec![len, 4 * h], dxw).expect("shape"),
        Tensor::new(vec![h, 4 * h], du).expect("shape"),
    )
}
