use std::collections::HashMap;

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named, persistent tensor that the optimizer may update.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Frozen parameters never receive gradients or optimizer state.
    pub trainable: bool,
    /// Per-row freeze flags for embedding tables (row 0 padding, pretrained rows).
    pub frozen_rows: Option<Vec<bool>>,
}

/// Owns every parameter of a model, in creation order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            trainable: true,
            frozen_rows: None,
        });
        id
    }

    /// Glorot-uniform initialized matrix of shape `[fan_in, fan_out]`.
    pub fn add_glorot(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        self.add(name, glorot_uniform(fan_in, fan_out, rng))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: impl Into<Vec<usize>>) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar elements across all parameters.
    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replaces every value from `other`, which must have identical layout.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::Contract("parameter stores differ in length".into()));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Contract(format!(
                    "parameter layout mismatch at {}",
                    dst.name
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

pub fn glorot_uniform<T: Scalar>(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::of(rng.gen_range(-limit..=limit)))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("glorot shape")
}

/// Gradient tensors indexed by [`ParamId`]; `None` for untouched parameters.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn empty(len: usize) -> Self {
        Gradients {
            grads: vec![None; len],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: &Tensor<T>) {
        match &mut self.grads[id.0] {
            Some(g) => g.add_assign(grad),
            slot @ None => *slot = Some(grad.clone()),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor<T>)> {
        self.grads
            .iter_mut()
            .enumerate()
            .filter_map(|(i, g)| g.as_mut().map(|g| (ParamId(i), g)))
    }

    /// L2 norm over every element of every present gradient.
    pub fn global_norm(&self) -> T {
        self.iter()
            .flat_map(|(_, g)| g.data().iter())
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: T) {
        for (_, g) in self.iter_mut() {
            for v in g.data_mut() {
                *v = *v * factor;
            }
        }
    }
}
