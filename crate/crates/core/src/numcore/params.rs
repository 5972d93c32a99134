use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// How a parameter tensor was initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    GlorotUniform { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

/// Named, ordered parameter tensors plus the record of how they were drawn.
#[derive(Clone, Debug)]
pub struct ParamSet<F> {
    tensors: IndexMap<String, Tensor<F>>,
    seed: u64,
    rng: ChaCha8Rng,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new(seed: u64) -> Self {
        ParamSet {
            tensors: IndexMap::new(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Draws and registers a new parameter. Names must be unique.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> Result<()> {
        if self.tensors.contains_key(name) {
            return Err(Error::invalid("parameter name", format!("duplicate {name}")));
        }
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![F::zero(); n],
            Init::Ones => vec![F::one(); n],
            Init::GlorotUniform { fan_in, fan_out } => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| F::of(self.rng.random_range(-limit..limit))).collect()
            }
        };
        self.tensors.insert(name.to_string(), Tensor::new(shape, data)?);
        Ok(())
    }

    /// Registers an existing tensor (used when loading checkpoints).
    pub fn insert(&mut self, name: &str, t: Tensor<F>) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            seed: self.seed,
            rng: self.rng.clone(),
        }
    }

    /// Same names and shapes as `other`.
    pub fn check_layout(&self, other: &ParamSet<F>) -> Result<()> {
        for (name, t) in other.iter() {
            let mine = self
                .get(name)
                .ok_or_else(|| Error::Missing(format!("parameter {name}")))?;
            if mine.shape() != t.shape() {
                return Err(Error::shape("parameter layout", t.shape(), mine.shape()));
            }
        }
        if self.len() != other.len() {
            return Err(Error::invalid("parameter layout", "parameter count differs"));
        }
        Ok(())
    }
}

/// Per-parameter gradients, keyed like the [`ParamSet`] they belong to.
#[derive(Clone, Debug)]
pub struct Gradients<F> {
    map: IndexMap<String, Tensor<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub(crate) fn from_map(map: IndexMap<String, Tensor<F>>) -> Self {
        Gradients { map }
    }

    pub fn zeros_like(params: &ParamSet<F>) -> Self {
        Gradients {
            map: params
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.map.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(Tensor::all_finite)
    }

    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v.f64() * v.f64())
            .sum::<f64>()
            .sqrt()
    }
}
