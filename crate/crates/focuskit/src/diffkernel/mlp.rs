//! Dense feed-forward networks assembled from tape ops.
//!
//! An [`Mlp`] owns parameter keys, not values; the values live in a
//! [`ParamStore`] so checkpointing and optimization see one flat list.
//! [`Mlp::bind`] creates the per-tape parameter leaves once, after which
//! the bound model can run any number of inputs on that tape with shared
//! gradient accumulation.

use serde::{Deserialize, Serialize};

use super::tape::{softmax_slice, Tape, Var};
use super::ParamStore;
use crate::error::{FocusError, Result};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    ReLU,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputActivation {
    None,
    Softmax,
    Sigmoid,
}

/// Architecture of a dense network. `widths[0]` is the input dimension;
/// each following width adds one affine layer. The hidden activation is
/// applied after every layer except the last, which gets
/// `output_activation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub output_activation: OutputActivation,
    pub init_seed: u64,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(FocusError::Spec(
                "mlp needs an input width and at least one layer".into(),
            ));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(FocusError::Spec("mlp widths must be positive".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

/// A registered network: parameter keys plus the spec that shaped them.
#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    /// (weight key, bias key) per layer.
    layers: Vec<(usize, usize)>,
}

impl Mlp {
    /// Register Glorot-initialized weights and zero biases under
    /// `prefix.layer<i>.{w,b}`, seeded by the spec.
    pub fn register(store: &mut ParamStore, prefix: &str, spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng_from_seed(spec.init_seed);
        let mut layers = Vec::new();
        for (i, pair) in spec.widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let w = store.add_glorot(&format!("{prefix}.layer{i}.w"), fan_out, fan_in, &mut rng)?;
            let b = store.add_zeros(&format!("{prefix}.layer{i}.b"), &[fan_out])?;
            layers.push((w, b));
        }
        Ok(Self { spec: spec.clone(), layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    /// Create this network's parameter leaves on a tape.
    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> BoundMlp {
        let layers = self
            .layers
            .iter()
            .map(|&(w, b)| (tape.param(store, w), tape.param(store, b)))
            .collect();
        BoundMlp { spec: self.spec.clone(), layers }
    }

    /// Plain forward pass without a tape, for inference. Agrees with the
    /// tape forward exactly (same operation order).
    pub fn infer(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.spec.input_dim() {
            return Err(FocusError::Validation(format!(
                "mlp input has {} values, expected {}",
                x.len(),
                self.spec.input_dim()
            )));
        }
        let n_layers = self.layers.len();
        let mut h = x.to_vec();
        for (i, &(wk, bk)) in self.layers.iter().enumerate() {
            let w = &store.get(wk).values;
            let b = &store.get(bk).values;
            let rows = self.spec.widths[i + 1];
            let cols = self.spec.widths[i];
            let mut y = Vec::with_capacity(rows);
            for r in 0..rows {
                let dot: f64 = w[r * cols..(r + 1) * cols].iter().zip(&h).map(|(a, b)| a * b).sum();
                y.push(dot + b[r]);
            }
            if i + 1 < n_layers {
                apply_activation(self.spec.activation, &mut y);
            }
            h = y;
        }
        match self.spec.output_activation {
            OutputActivation::None => {}
            OutputActivation::Softmax => h = softmax_slice(&h),
            OutputActivation::Sigmoid => h.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp())),
        }
        Ok(h)
    }
}

fn apply_activation(act: Activation, y: &mut [f64]) {
    match act {
        Activation::ReLU => y.iter_mut().for_each(|v| *v = v.max(0.0)),
        Activation::Tanh => y.iter_mut().for_each(|v| *v = v.tanh()),
    }
}

/// An [`Mlp`] whose parameters are leaves on a specific tape.
pub struct BoundMlp {
    spec: MlpSpec,
    layers: Vec<(Var, Var)>,
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let n_layers = self.layers.len();
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let rows = self.spec.widths[i + 1];
            let cols = self.spec.widths[i];
            h = tape.affine(w, b, h, rows, cols);
            if i + 1 < n_layers {
                h = match self.spec.activation {
                    Activation::ReLU => tape.relu(h),
                    Activation::Tanh => tape.tanh(h),
                };
            }
        }
        match self.spec.output_activation {
            OutputActivation::None => h,
            OutputActivation::Softmax => tape.softmax(h),
            OutputActivation::Sigmoid => tape.sigmoid(h),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(widths: &[usize], out: OutputActivation, seed: u64) -> MlpSpec {
        MlpSpec {
            widths: widths.to_vec(),
            activation: Activation::ReLU,
            output_activation: out,
            init_seed: seed,
        }
    }

    #[test]
    fn identity_linear_layer_passes_input_through() {
        let mut store = ParamStore::new();
        let mlp = Mlp::register(&mut store, "m", &spec(&[2, 2], OutputActivation::None, 0)).unwrap();
        let wkey = store.index_of("m.layer0.w").unwrap();
        *store.values_mut(wkey) = vec![1.0, 0.0, 0.0, 1.0];
        assert_eq!(mlp.infer(&store, &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut store = ParamStore::new();
        let mlp = Mlp::register(&mut store, "m", &spec(&[3, 2], OutputActivation::None, 0)).unwrap();
        let wkey = store.index_of("m.layer0.w").unwrap();
        *store.values_mut(wkey) = vec![0.0; 6];
        assert_eq!(mlp.infer(&store, &[4.0, -1.0, 9.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn two_layer_forward_matches_scalar_recomputation() {
        let mut store = ParamStore::new();
        let spec = spec(&[2, 3, 2], OutputActivation::None, 42);
        let mlp = Mlp::register(&mut store, "m", &spec).unwrap();
        let x = [0.7, -1.3];
        let got = mlp.infer(&store, &x).unwrap();

        let w0 = &store.get(store.index_of("m.layer0.w").unwrap()).values;
        let b0 = &store.get(store.index_of("m.layer0.b").unwrap()).values;
        let w1 = &store.get(store.index_of("m.layer1.w").unwrap()).values;
        let b1 = &store.get(store.index_of("m.layer1.b").unwrap()).values;
        let mut hidden = [0.0; 3];
        for r in 0..3 {
            hidden[r] = (w0[r * 2] * x[0] + w0[r * 2 + 1] * x[1] + b0[r]).max(0.0);
        }
        for r in 0..2 {
            let mut acc = b1[r];
            for c in 0..3 {
                acc += w1[r * 3 + c] * hidden[c];
            }
            assert!((got[r] - acc).abs() < 1e-12, "row {r}: {} vs {acc}", got[r]);
        }
    }

    #[test]
    fn tape_forward_agrees_with_infer() {
        let mut store = ParamStore::new();
        for out in [OutputActivation::None, OutputActivation::Softmax, OutputActivation::Sigmoid] {
            let mlp = Mlp::register(
                &mut store,
                &format!("m{out:?}"),
                &spec(&[4, 5, 3], out, 7),
            )
            .unwrap();
            let x = vec![0.1, -0.2, 0.3, 2.0];
            let plain = mlp.infer(&store, &x).unwrap();
            let mut tape = Tape::new();
            let bound = mlp.bind(&mut tape, &store);
            let xv = tape.constant(x);
            let y = bound.forward(&mut tape, xv);
            assert_eq!(tape.value(y), plain.as_slice());
        }
    }

    #[test]
    fn input_dimension_mismatch_is_an_error() {
        let mut store = ParamStore::new();
        let mlp = Mlp::register(&mut store, "m", &spec(&[3, 2], OutputActivation::None, 0)).unwrap();
        assert!(mlp.infer(&store, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        assert!(spec(&[3], OutputActivation::None, 0).validate().is_err());
        assert!(spec(&[3, 0, 2], OutputActivation::None, 0).validate().is_err());
    }

    #[test]
    fn registration_is_seed_deterministic() {
        let s = spec(&[4, 4, 2], OutputActivation::None, 11);
        let mut store_a = ParamStore::new();
        Mlp::register(&mut store_a, "m", &s).unwrap();
        let mut store_b = ParamStore::new();
        Mlp::register(&mut store_b, "m", &s).unwrap();
        for (a, b) in store_a.iter().zip(store_b.iter()) {
            assert_eq!(a.values, b.values);
        }
    }
}
