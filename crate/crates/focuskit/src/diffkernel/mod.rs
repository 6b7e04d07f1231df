//! Minimal deterministic differentiable compute kernel.
//!
//! A [`Tape`] records vector-valued operations as they are evaluated;
//! [`Tape::backward`] replays them in reverse and accumulates exact
//! gradients into the owning [`ParamStore`]. The op set is exactly what
//! the diagnostic pipeline needs: affine layers, pointwise
//! nonlinearities, softmax (plain and certainty-boosted), fused
//! softmax cross-entropy, elementwise product, dot, weighted sum,
//! linear combination, max pooling, and the entropy of a probability
//! vector. No convolutions, no GPU, f64 throughout.
//!
//! Training a model requires exclusive ownership of its store (single
//! writer); inference reads an immutable snapshot and is safe from many
//! threads.

pub mod adam;
pub mod gradcheck;
pub mod mlp;
pub mod tape;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::grad_check;
pub use mlp::{Activation, BoundMlp, Mlp, MlpSpec, OutputActivation};
pub use tape::{cross_entropy, Tape, Var};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FocusError, Result};

/// One named trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
}

impl ParamTensor {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Ordered collection of every trainable tensor of a model. Parameter
/// keys are indices into this store; registration order fixes the
/// checkpoint layout.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<ParamTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor with explicit values. Names must be unique.
    pub fn add(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<usize> {
        let expect: usize = shape.iter().product();
        if values.len() != expect {
            return Err(FocusError::Training(format!(
                "param {name}: {} values do not fill shape {shape:?}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FocusError::Training(format!("param {name}: non-finite init")));
        }
        if self.params.iter().any(|p| p.name == name) {
            return Err(FocusError::Training(format!("duplicate param name {name}")));
        }
        let grad = vec![0.0; values.len()];
        self.params.push(ParamTensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            values,
            grad,
        });
        Ok(self.params.len() - 1)
    }

    /// Glorot-uniform weight matrix: U(-a, a) with
    /// a = sqrt(6 / (fan_in + fan_out)), drawn row-major.
    pub fn add_glorot(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<usize> {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let values = (0..rows * cols).map(|_| rng.gen::<f64>() * 2.0 * a - a).collect();
        self.add(name, &[rows, cols], values)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> Result<usize> {
        let n: usize = shape.iter().product();
        self.add(name, shape, vec![0.0; n])
    }

    pub fn get(&self, key: usize) -> &ParamTensor {
        &self.params[key]
    }

    pub fn values_mut(&mut self, key: usize) -> &mut Vec<f64> {
        &mut self.params[key].values
    }

    pub(crate) fn grad_mut(&mut self, key: usize) -> &mut [f64] {
        &mut self.params[key].grad
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }
}
