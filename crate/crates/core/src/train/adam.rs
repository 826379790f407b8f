use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Gradients, ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are created lazily for trainable
/// parameters that receive a gradient; frozen embedding rows are skipped
/// entirely (no update, no moment change).
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// First and second moments of a parameter, if it has state.
    pub fn moments(&self, id: ParamId) -> Option<(&Tensor<T>, &Tensor<T>)> {
        self.moments.get(id.index())?.as_ref().map(|(m, v)| (m, v))
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let correct1 = T::of(1.0 - c.beta1.powi(t));
        let correct2 = T::of(1.0 - c.beta2.powi(t));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }

        for (id, g) in grads.iter() {
            let p = params.get_mut(id);
            if !p.trainable {
                continue;
            }
            if p.value.shape() != g.shape() {
                return Err(Error::Contract(format!(
                    "gradient for {} has shape {:?}, parameter {:?}",
                    p.name,
                    g.shape(),
                    p.value.shape()
                )));
            }
            let (m, v) = self.moments[id.index()]
                .get_or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let width = if p.value.rank() == 2 { p.value.cols() } else { p.value.len() };
            let frozen = p.frozen_rows.as_deref();
            let (m, v, theta) = (m.data_mut(), v.data_mut(), p.value.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                if frozen.is_some_and(|f| f[i / width]) {
                    continue;
                }
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let m_hat = m[i] / correct1;
                let v_hat = v[i] / correct2;
                theta[i] = theta[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Zeroes gradient entries that the optimizer will not apply (untrainable
/// parameters and frozen rows), so they do not count towards clipping.
pub fn mask_untrainable<T: Scalar>(params: &ParamStore<T>, grads: &mut Gradients<T>) {
    for (id, g) in grads.iter_mut() {
        let p = params.get(id);
        if !p.trainable {
            g.data_mut().iter_mut().for_each(|v| *v = T::zero());
        } else if let Some(frozen) = &p.frozen_rows {
            let width = g.len() / frozen.len().max(1);
            for (r, _) in frozen.iter().enumerate().filter(|(_, &f)| f) {
                g.data_mut()[r * width..(r + 1) * width].iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm().as_f64();
    if norm > max_norm && norm.is_finite() {
        grads.scale(T::of(max_norm / norm));
    }
    norm
}
