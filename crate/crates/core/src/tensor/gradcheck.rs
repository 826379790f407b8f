use super::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Worst relative error for one parameter.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub id: ParamId,
    pub name: String,
    pub elements: usize,
    /// Elements whose perturbations crossed a relu or max boundary and
    /// were left out of `max_relative_error`.
    pub kinks: usize,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_relative_error)
            .fold(0.0, f64::max)
    }
}

/// Compares analytic gradients of `forward` against central differences.
///
/// For every element of every listed parameter, the relative error is
/// `|g - ĝ| / max(|g|, |ĝ|, 1e-8)` where `ĝ = (f(θ+ε) - f(θ-ε)) / 2ε`.
/// Elements where `θ±ε` changes the branch signature of the forward pass
/// (a relu sign or a max winner flips) straddle a kink, where the central
/// difference does not estimate the derivative; they are counted in
/// [`ParamCheck::kinks`] instead. The store is restored to its original
/// values on return.
pub fn grad_check<T, F>(
    store: &mut ParamStore<T>,
    params: &[ParamId],
    epsilon: T,
    forward: F,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: for<'g> Fn(&mut Graph<'g, T>) -> Result<Var>,
{
    grad_check_steps(store, params, &[epsilon], forward)
}

/// [`grad_check`] with Ridders' extrapolation over a ladder of steps.
///
/// Each element is differenced at every step in `steps`, largest first,
/// and the central differences are extrapolated to a zero step in `ε²`
/// (Neville's scheme). The estimate kept is the tableau entry with the
/// smallest error estimate; the ladder stops once extrapolation starts to
/// diverge, which is where rounding takes over. Steps that cross a kink
/// are left out of the tableau. A single step is a plain central
/// difference.
pub fn grad_check_steps<T, F>(
    store: &mut ParamStore<T>,
    params: &[ParamId],
    steps: &[T],
    forward: F,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: for<'g> Fn(&mut Graph<'g, T>) -> Result<Var>,
{
    if steps.is_empty() || steps.iter().any(|e| !(e.as_f64() > 0.0)) {
        return Err(Error::Contract("grad_check needs positive steps".into()));
    }
    let mut ladder = steps.to_vec();
    ladder.sort_by(|a, b| b.as_f64().total_cmp(&a.as_f64()));
    let eval = |store: &ParamStore<T>| -> Result<(T, u64)> {
        let mut g = Graph::with_params(store);
        let loss = forward(&mut g)?;
        Ok((g.value(loss).item()?, g.branch_signature()))
    };

    let (analytic, base) = {
        let mut g = Graph::with_params(&*store);
        let loss = forward(&mut g)?;
        let base = (g.value(loss).item()?, g.branch_signature());
        g.backward(loss)?;
        (g.param_grads(), base)
    };
    let again = eval(store)?;
    if again != base {
        return Err(Error::Contract(format!(
            "forward is not deterministic: {} vs {}",
            base.0, again.0
        )));
    }

    let mut report = Vec::with_capacity(params.len());
    for &id in params {
        let n = store.value(id).len();
        let mut worst = 0.0f64;
        let mut kinks = 0;
        for e in 0..n {
            let orig = store.value(id).data()[e];
            let mut tableau = Ridders::default();
            for &eps in &ladder {
                store.get_mut(id).value.data_mut()[e] = orig + eps;
                let plus = eval(store);
                store.get_mut(id).value.data_mut()[e] = orig - eps;
                let minus = eval(store);
                store.get_mut(id).value.data_mut()[e] = orig;
                let ((plus, sig_plus), (minus, sig_minus)) = (plus?, minus?);
                if sig_plus != base.1 || sig_minus != base.1 {
                    continue;
                }
                let eps = eps.as_f64();
                if !tableau.push(eps, (plus - minus).as_f64() / (2.0 * eps)) {
                    break;
                }
            }
            let Some(numeric) = tableau.best else {
                kinks += 1;
                continue;
            };
            let exact = analytic.get(id).map_or(0.0, |g| g.data()[e].as_f64());
            let denom = exact.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((exact - numeric).abs() / denom);
        }
        report.push(ParamCheck {
            id,
            name: store.get(id).name.clone(),
            elements: n,
            kinks,
            max_relative_error: worst,
        });
    }
    Ok(GradCheckReport { params: report })
}

/// Neville tableau of central differences, extrapolated in `h²`.
#[derive(Default)]
struct Ridders {
    steps: Vec<f64>,
    last_row: Vec<f64>,
    best: Option<f64>,
    error: f64,
}

impl Ridders {
    const SAFE: f64 = 2.0;

    /// Adds the difference at step `h`; false once the tableau diverges.
    fn push(&mut self, h: f64, d: f64) -> bool {
        let i = self.steps.len();
        if i == 0 {
            self.error = f64::INFINITY;
            self.best = Some(d);
        }
        let mut row = vec![d];
        for j in 1..=i {
            let (x0, xi) = (self.steps[i - j].powi(2), h * h);
            let v = (x0 * row[j - 1] - xi * self.last_row[j - 1]) / (x0 - xi);
            let err = (v - row[j - 1]).abs().max((v - self.last_row[j - 1]).abs());
            if err <= self.error {
                self.error = err;
                self.best = Some(v);
            }
            row.push(v);
        }
        let diverged = i > 0 && (row[i] - self.last_row[i - 1]).abs() >= Self::SAFE * self.error;
        self.steps.push(h);
        self.last_row = row;
        !diverged
    }
}
