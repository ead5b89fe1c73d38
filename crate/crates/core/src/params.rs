//! Named parameter storage and binding onto a [`Tape`].

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Trainable tensors keyed by dotted name (e.g. `blocks.0.attn.q.w`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor<f32>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> u64 {
        self.tensors.values().map(|t| t.len() as u64).sum()
    }

    /// Copy every tensor whose name starts with `prefix`, with the prefix removed.
    pub fn with_prefix_stripped(&self, prefix: &str) -> ParamSet {
        let tensors = self
            .tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect();
        ParamSet { tensors }
    }

    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet) {
        for (k, v) in &other.tensors {
            self.tensors.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Place every tensor on the tape. `trainable` selects tracked leaves vs constants.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let t = v.cast::<T>();
                let var = if trainable { tape.param(t) } else { tape.constant(t) };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// Collect gradients for all bound parameters after a backward pass.
    /// Parameters the loss never reached get zero gradients.
    pub fn grads_from<T: Scalar>(&self, tape: &Tape<T>, bound: &Bound) -> BTreeMap<String, Vec<f32>> {
        self.tensors
            .iter()
            .map(|(k, t)| {
                let g = bound
                    .vars
                    .get(k)
                    .and_then(|&v| tape.grad(v))
                    .map(|g| g.iter().map(|x| x.as_f64() as f32).collect())
                    .unwrap_or_else(|| vec![0.0; t.len()]);
                (k.clone(), g)
            })
            .collect()
    }
}

/// Tape handles for a bound [`ParamSet`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Bind existing tape vars under parameter names.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter '{name}' is not bound")))
    }
}

pub(crate) fn normal(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| (rng.normal() * std) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// He-normal initialisation for ReLU convolutions.
pub(crate) fn he_normal(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    normal(rng, shape, (2.0 / fan_in as f64).sqrt())
}
