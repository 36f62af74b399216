use std::collections::BTreeMap;

use super::{Gradients, Graph, Result, Rng, Tensor, TensorError, Var};

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

/// Gradients keyed by parameter name.
pub type ParamGrads = BTreeMap<String, Tensor>;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t.with_grad(true));
    }

    /// Glorot-style normal init for a `[fan_in, fan_out]` weight.
    pub fn init_weight(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        self.insert(name, Tensor::randn(&[fan_in, fan_out], std, rng));
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn init_ones(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::full(shape, 1.0));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Registers every tensor as a borrowed leaf on `graph`.
    pub fn bind<'p>(&'p self, graph: &mut Graph<'p>) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), graph.leaf(t)))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> std::result::Result<(), String> {
        match self.tensors.iter().find(|(_, t)| !t.is_finite()) {
            Some((name, _)) => Err(name.clone()),
            None => Ok(()),
        }
    }
}

/// Graph handles for a bound [`ParamSet`].
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    /// Pulls each parameter's gradient out of `grads`; parameters the loss
    /// does not depend on get zeros.
    pub fn collect(&self, mut grads: Gradients, params: &ParamSet) -> ParamGrads {
        self.vars
            .iter()
            .map(|(name, v)| {
                let g = grads.take(*v).unwrap_or_else(|| {
                    Tensor::zeros(params.get(name).expect("bound from this set").shape())
                });
                (name.clone(), g)
            })
            .collect()
    }
}
