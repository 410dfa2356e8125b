//! Network definitions: the conditional generator, the task classifier
//! (used for both the trained model and the frozen label predictor), and the
//! domain critic whose embedding defines transport costs.

mod classifier;
mod critic;
mod generator;
pub mod io;

pub use classifier::{ClassifierSpec, TaskClassifierWeights};
pub use critic::{CriticSpec, CriticWeights};
pub use generator::{GeneratorSpec, GeneratorWeights};

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Tensor, Var};

/// Named parameter tensors of one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params(BTreeMap<String, Tensor>);

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.0.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.0
            .get(name)
            .ok_or_else(|| Error::Malformed(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.0.values().map(Tensor::len).sum()
    }

    /// Bitwise equality of every tensor.
    pub fn bit_eq(&self, other: &Params) -> bool {
        self.0.len() == other.0.len()
            && self
                .0
                .iter()
                .zip(other.0.iter())
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }

    /// Collects the gradients of parameters registered under `prefix`.
    pub fn grads_from(&self, grads: &Gradients, prefix: &str) -> Params {
        Params(
            self.0
                .iter()
                .map(|(k, t)| {
                    let g = grads
                        .param(&format!("{prefix}{k}"))
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(t.shape()));
                    (k.clone(), g)
                })
                .collect(),
        )
    }

    pub fn l2_norm(&self) -> f64 {
        self.0
            .values()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

impl FromIterator<(String, Tensor)> for Params {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Params(iter.into_iter().collect())
    }
}

/// How a network's parameters enter a graph.
#[derive(Clone, Copy, Debug)]
pub struct Binding<'a> {
    pub prefix: &'a str,
    pub trainable: bool,
}

impl<'a> Binding<'a> {
    pub fn trainable(prefix: &'a str) -> Self {
        Self {
            prefix,
            trainable: true,
        }
    }

    pub fn frozen(prefix: &'a str) -> Self {
        Self {
            prefix,
            trainable: false,
        }
    }

    pub(crate) fn param(&self, g: &mut Graph, params: &Params, name: &str) -> Result<Var> {
        let t = params.get(name)?.clone().with_requires_grad(self.trainable);
        Ok(g.param(&format!("{}{name}", self.prefix), &t))
    }
}

/// One-hot domain indicator of length `K_s + K_n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DomainCode {
    index: usize,
    len: usize,
}

impl DomainCode {
    pub fn new(index: usize, len: usize) -> Result<Self> {
        if index >= len {
            return Err(Error::DomainCode { index, len });
        }
        Ok(Self { index, len })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn one_hot(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.len];
        v[self.index] = 1.0;
        v
    }
}

/// Common surface of the three weight sets.
pub trait Weights: Sized {
    fn params(&self) -> &Params;
    fn params_mut(&mut self) -> &mut Params;
    /// Rebuilds the weight set from tensors, inferring the architecture from shapes.
    fn from_params(params: Params) -> Result<Self>;

    fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::save_params(self.params(), path)
    }

    fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_params(io::load_params(path)?)
    }
}

/// He-uniform: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub(crate) fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn domain_code_is_one_hot() {
        let c = DomainCode::new(2, 6).unwrap();
        assert_eq!(c.one_hot(), vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert!(DomainCode::new(6, 6).is_err());
    }
}
