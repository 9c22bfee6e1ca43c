//! Named learnable parameters and their gradient buffers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Owns every parameter of a model. Gradients accumulate until
/// [`ParamStore::zero_grads`] is called.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param { name, value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::InvalidShape(format!(
                "snapshot holds {} tensors, store has {}",
                values.len(),
                self.params.len()
            )));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::InvalidShape(format!(
                    "parameter {}: snapshot shape {:?} != {:?}",
                    p.name,
                    v.shape(),
                    p.value.shape()
                )));
            }
            p.value = v.clone();
        }
        Ok(())
    }

    /// Overwrites each parameter whose name also exists in `other`.
    /// Returns the number of parameters copied.
    pub fn copy_matching(&mut self, other: &ParamStore) -> Result<usize> {
        let mut copied = 0;
        for p in &mut self.params {
            if let Some(id) = other.find(&p.name) {
                let src = other.value(id);
                if src.shape() != p.value.shape() {
                    return Err(Error::InvalidShape(format!(
                        "parameter {}: {:?} != {:?}",
                        p.name,
                        src.shape(),
                        p.value.shape()
                    )));
                }
                p.value = src.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }
}

/// Seeded initializer for zero-mean uniform weights.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, shape: Shape, fan_in: usize) -> Tensor {
        self.uniform_bound(shape, 1.0 / (fan_in.max(1) as f64).sqrt())
    }

    /// Bound `sqrt(6/fan_in)`: keeps activation variance roughly constant
    /// through stacked ReLU layers.
    pub fn he_uniform(&mut self, shape: Shape, fan_in: usize) -> Tensor {
        self.uniform_bound(shape, (6.0 / fan_in.max(1) as f64).sqrt())
    }

    fn uniform_bound(&mut self, shape: Shape, bound: f64) -> Tensor {
        let data = (0..shape.numel())
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        Tensor::from_vec(shape, data).expect("length matches shape")
    }
}
