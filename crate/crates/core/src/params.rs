//! Named parameter storage with gradients and deterministic initialization.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// One named parameter: value, gradient of the same shape, trainable flag.
#[derive(Clone, Debug)]
pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

/// Ordered, name-indexed collection of parameters. Order is insertion order
/// and defines the checkpoint serialization order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::arg("param_set", format!("duplicate parameter `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            value,
            grad,
            trainable,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry<T>> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i])
    }

    /// Total number of scalar values across all parameters.
    pub fn scalar_count(&self) -> u64 {
        self.entries.iter().map(|e| e.value.numel() as u64).sum()
    }

    /// Number of scalars in trainable parameters only.
    pub fn trainable_scalar_count(&self) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel() as u64)
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(T::ZERO);
        }
    }

    /// Mark every parameter whose name starts with `prefix` as (non-)trainable.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = trainable;
            }
        }
    }

    /// Insert a parameter's current value into a graph as a leaf and record
    /// the (parameter, node) pair for gradient routing.
    pub fn bind(&self, g: &mut Graph<T>, name: &str, binding: &mut Binding) -> Result<Var> {
        let idx = self
            .position(name)
            .ok_or_else(|| Error::arg("param_set", format!("unknown parameter `{name}`")))?;
        let var = g.leaf(self.entries[idx].value.clone());
        binding.pairs.push((idx, var));
        Ok(var)
    }

    /// Add `scale` times the bound gradients from a backward sweep into the
    /// parameter gradient buffers.
    pub fn accumulate(&mut self, binding: &Binding, grads: &[Option<Tensor<T>>], scale: T) {
        for &(idx, var) in &binding.pairs {
            if let Some(g) = &grads[var.0] {
                self.entries[idx].grad.add_scaled_assign(g, scale);
            }
        }
    }

    /// Extract bound gradients as (parameter index, tensor) pairs without
    /// touching the shared buffers; used for deterministic parallel batching.
    pub fn extract(
        &self,
        binding: &Binding,
        grads: &[Option<Tensor<T>>],
    ) -> Vec<(usize, Tensor<T>)> {
        binding
            .pairs
            .iter()
            .filter_map(|&(idx, var)| grads[var.0].clone().map(|g| (idx, g)))
            .collect()
    }

    pub fn add_grad_at(&mut self, idx: usize, g: &Tensor<T>, scale: T) {
        self.entries[idx].grad.add_scaled_assign(g, scale);
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for e in &self.entries {
            out.add(e.name.clone(), e.value.cast::<U>(), e.trainable).unwrap();
        }
        out
    }
}

/// Parameter-to-node bookkeeping for a single graph.
#[derive(Default)]
pub struct Binding {
    pairs: Vec<(usize, Var)>,
}

impl Binding {
    pub fn new() -> Self {
        Binding { pairs: Vec::new() }
    }
}

/// Initialization rule for one parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum InitKind {
    /// N(0, sqrt(2 / fan_in)); convolution and dense weights ahead of relu.
    HeNormal { fan_in: usize },
    /// U(-b, b) with b = 1/sqrt(fan_in); LSTM weights.
    UniformFan { fan_in: usize },
    /// N(0, std); token/positional embeddings.
    Normal { std: f64 },
    Zeros,
    Ones,
}

pub fn init_tensor<T: Scalar>(shape: &[usize], kind: InitKind, rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = match kind {
        InitKind::Zeros => vec![T::ZERO; n],
        InitKind::Ones => vec![T::ONE; n],
        InitKind::HeNormal { fan_in } => {
            let std = (2.0 / fan_in.max(1) as f64).sqrt();
            let dist = Normal::new(0.0, std).unwrap();
            (0..n).map(|_| T::from_f64(dist.sample(rng))).collect()
        }
        InitKind::UniformFan { fan_in } => {
            let b = 1.0 / (fan_in.max(1) as f64).sqrt();
            (0..n).map(|_| T::from_f64(rng.gen_range(-b..b))).collect()
        }
        InitKind::Normal { std } => {
            let dist = Normal::new(0.0, std).unwrap();
            (0..n).map(|_| T::from_f64(dist.sample(rng))).collect()
        }
    };
    Tensor::from_vec(shape, data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::<f64>::new();
        p.add("a", Tensor::zeros(&[2]), true).unwrap();
        assert!(p.add("a", Tensor::zeros(&[2]), true).is_err());
    }

    #[test]
    fn grad_shape_matches_value_shape() {
        let mut p = ParamSet::<f64>::new();
        p.add("w", Tensor::zeros(&[3, 4]), true).unwrap();
        let e = p.get("w").unwrap();
        assert_eq!(e.grad.shape(), e.value.shape());
    }

    #[test]
    fn bind_and_accumulate_routes_gradients() {
        let mut p = ParamSet::<f64>::new();
        p.add("w", Tensor::filled(&[2], 3.0f64), true).unwrap();
        let mut g = Graph::new();
        let mut binding = Binding::new();
        let w = p.bind(&mut g, "w", &mut binding).unwrap();
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum_all(sq);
        let grads = g.backward(loss).unwrap();
        p.accumulate(&binding, &grads, 1.0);
        assert_eq!(p.get("w").unwrap().grad.data(), &[6.0, 6.0]);
    }

    #[test]
    fn trainable_prefix_toggling() {
        let mut p = ParamSet::<f64>::new();
        p.add("encoder.w", Tensor::zeros(&[2]), true).unwrap();
        p.add("head.w", Tensor::zeros(&[2]), true).unwrap();
        p.set_trainable_prefix("encoder.", false);
        assert!(!p.get("encoder.w").unwrap().trainable);
        assert!(p.get("head.w").unwrap().trainable);
    }
}
