//! Central finite-difference verification of tape gradients.
//!
//! The builder closure must construct the same scalar loss graph for the
//! parameter values it is handed each call; anything else it captures
//! (inputs, targets, frozen weighting constants) must stay fixed, or the
//! numeric probe measures a different function than the analytic pass.

use super::tape::{Tape, Var};
use super::ParamStore;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;

/// Max over all parameter scalars of
/// |g_analytic - g_numeric| / max(|g_analytic|, |g_numeric|, 1e-8).
pub fn max_relative_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (ga, gn) in analytic.iter().zip(numeric) {
        assert_eq!(ga.len(), gn.len());
        for (&a, &n) in ga.iter().zip(gn) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Numeric gradient of the builder's scalar loss for every parameter
/// scalar in the store. The store is restored exactly on return.
pub fn fd_gradients<F>(store: &mut ParamStore, mut build_loss: F, step: f64) -> Vec<Vec<f64>>
where
    F: FnMut(&mut Tape, &ParamStore) -> Var,
{
    let n_params = store.len();
    let mut out = Vec::with_capacity(n_params);
    for pi in 0..n_params {
        let len = store.get(pi).len();
        let mut g = vec![0.0; len];
        for j in 0..len {
            let orig = store.get(pi).values[j];
            store.values_mut(pi)[j] = orig + step;
            let f_plus = eval_scalar(store, &mut build_loss);
            store.values_mut(pi)[j] = orig - step;
            let f_minus = eval_scalar(store, &mut build_loss);
            store.values_mut(pi)[j] = orig;
            g[j] = (f_plus - f_minus) / (2.0 * step);
        }
        out.push(g);
    }
    out
}

fn eval_scalar<F>(store: &ParamStore, build_loss: &mut F) -> f64
where
    F: FnMut(&mut Tape, &ParamStore) -> Var,
{
    let mut tape = Tape::new();
    let loss = build_loss(&mut tape, store);
    let v = tape.value(loss);
    assert_eq!(v.len(), 1, "grad check loss must be scalar");
    v[0]
}

/// Compare reverse-mode gradients against central differences with
/// [`FD_STEP`] and return the max relative error. Gradient buffers are
/// zeroed afterwards.
pub fn grad_check<F>(store: &mut ParamStore, mut build_loss: F) -> f64
where
    F: FnMut(&mut Tape, &ParamStore) -> Var,
{
    assert!(store.n_scalars() < 10_000, "grad check is for small models");
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = build_loss(&mut tape, store);
    tape.backward(loss, store);
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.clone()).collect();
    let numeric = fd_gradients(store, &mut build_loss, FD_STEP);
    store.zero_grad();
    max_relative_error(&analytic, &numeric)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkernel::adam::{Adam, AdamConfig};
    use crate::diffkernel::mlp::{Activation, Mlp, MlpSpec, OutputActivation};
    use crate::rng::rng_from_seed;
    use rand::Rng;

    #[test]
    fn linear_regression_gradients_are_near_exact() {
        // Quadratic loss, so central differences are exact up to float
        // rounding.
        let mut store = ParamStore::new();
        store.add("w", &[2], vec![0.3, -0.8]).unwrap();
        store.add("b", &[1], vec![0.1]).unwrap();
        let points = [([1.0, 2.0], 0.5), ([-1.0, 0.5], -1.0), ([0.2, 0.9], 2.0)];
        let err = grad_check(&mut store, |tape, store| {
            let w = tape.param(store, 0);
            let b = tape.param(store, 1);
            let mut residuals = Vec::new();
            for (x, y) in &points {
                let xv = tape.constant(x.to_vec());
                let pred_dot = tape.dot(w, xv);
                let pred = tape.lincomb(&[(1.0, pred_dot), (1.0, b)]);
                let target = tape.constant(vec![*y]);
                let r = tape.lincomb(&[(1.0, pred), (-1.0, target)]);
                residuals.push(tape.mul_elem(r, r));
            }
            let terms: Vec<(f64, Var)> = residuals.iter().map(|&r| (1.0, r)).collect();
            tape.lincomb(&terms)
        });
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn random_two_layer_classifiers_pass_fd_check() {
        for seed in 0..5u64 {
            let mut store = ParamStore::new();
            let spec = MlpSpec {
                widths: vec![4, 6, 3],
                activation: Activation::ReLU,
                output_activation: OutputActivation::None,
                init_seed: seed,
            };
            let mlp = Mlp::register(&mut store, "clf", &spec).unwrap();
            let mut rng = rng_from_seed(1000 + seed);
            let x: Vec<f64> = (0..4).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let y = (seed % 3) as usize;
            let mut target = vec![0.0; 3];
            target[y] = 1.0;
            let err = grad_check(&mut store, |tape, store| {
                let bound = mlp.bind(tape, store);
                let xv = tape.constant(x.clone());
                let logits = bound.forward(tape, xv);
                tape.softmax_cross_entropy(logits, &target)
            });
            assert!(err < 1e-4, "seed {seed}: max relative error {err}");
        }
    }

    #[test]
    fn tanh_sigmoid_and_entropy_ops_pass_fd_check() {
        let mut store = ParamStore::new();
        store.add("a", &[3], vec![0.4, -0.6, 1.1]).unwrap();
        store.add("g", &[3], vec![0.2, 0.9, -0.5]).unwrap();
        let err = grad_check(&mut store, |tape, store| {
            let a = tape.param(store, 0);
            let g = tape.param(store, 1);
            let t = tape.tanh(a);
            let s = tape.sigmoid(g);
            let gated = tape.mul_elem(t, s);
            let probs = tape.softmax(gated);
            tape.entropy(probs)
        });
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn corrupted_analytic_gradient_is_detected() {
        let mut store = ParamStore::new();
        store.add("w", &[2], vec![0.5, -0.25]).unwrap();
        let build = |tape: &mut Tape, store: &ParamStore| {
            let w = tape.param(store, 0);
            let x = tape.constant(vec![1.0, 2.0]);
            let d = tape.dot(w, x);
            tape.mul_elem(d, d)
        };
        store.zero_grad();
        let mut tape = Tape::new();
        let loss = build(&mut tape, &store);
        tape.backward(loss, &mut store);
        let mut analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.clone()).collect();
        let numeric = fd_gradients(&mut store, build, FD_STEP);
        assert!(max_relative_error(&analytic, &numeric) < 1e-6);
        // A wrong backward rule must trip the checker.
        analytic[0][1] = analytic[0][1] * 1.5 + 0.1;
        assert!(max_relative_error(&analytic, &numeric) > 1e-2);
    }

    #[test]
    fn training_shrinks_loss_on_separable_toy() {
        // Two linearly separable classes; 200 Adam steps must cut the
        // loss below 10% of its initial value.
        let mut rng = rng_from_seed(3);
        let mut data = Vec::new();
        for _ in 0..20 {
            let class = rng.gen::<bool>() as usize;
            let center = if class == 0 { -2.0 } else { 2.0 };
            let x = vec![center + rng.gen::<f64>() - 0.5, center - rng.gen::<f64>() + 0.5];
            data.push((x, class));
        }
        let mut store = ParamStore::new();
        let spec = MlpSpec {
            widths: vec![2, 2],
            activation: Activation::ReLU,
            output_activation: OutputActivation::None,
            init_seed: 5,
        };
        let mlp = Mlp::register(&mut store, "clf", &spec).unwrap();
        let mut adam = Adam::new(AdamConfig::with_lr(0.05), &store);
        let batch_loss = |tape: &mut Tape, store: &ParamStore, data: &[(Vec<f64>, usize)]| {
            let bound = mlp.bind(tape, store);
            let mut losses = Vec::new();
            for (x, y) in data {
                let xv = tape.constant(x.clone());
                let logits = bound.forward(tape, xv);
                let mut target = vec![0.0; 2];
                target[*y] = 1.0;
                losses.push(tape.softmax_cross_entropy(logits, &target));
            }
            let scale = 1.0 / losses.len() as f64;
            let terms: Vec<(f64, Var)> = losses.iter().map(|&l| (scale, l)).collect();
            tape.lincomb(&terms)
        };
        let mut initial = f64::NAN;
        let mut last = f64::NAN;
        for step in 0..200 {
            store.zero_grad();
            let mut tape = Tape::new();
            let loss = batch_loss(&mut tape, &store, &data);
            last = tape.value(loss)[0];
            if step == 0 {
                initial = last;
            }
            tape.backward(loss, &mut store);
            adam.step(&mut store).unwrap();
        }
        assert!(last < 0.1 * initial, "initial {initial}, final {last}");
    }

    #[test]
    fn training_trajectory_is_bitwise_deterministic() {
        let run = || {
            let mut store = ParamStore::new();
            let spec = MlpSpec {
                widths: vec![3, 4, 2],
                activation: Activation::Tanh,
                output_activation: OutputActivation::None,
                init_seed: 9,
            };
            let mlp = Mlp::register(&mut store, "clf", &spec).unwrap();
            let mut adam = Adam::new(AdamConfig::with_lr(0.01), &store);
            for step in 0..50 {
                store.zero_grad();
                let mut tape = Tape::new();
                let bound = mlp.bind(&mut tape, &store);
                let x = tape.constant(vec![0.5, (step % 3) as f64 - 1.0, -0.25]);
                let logits = bound.forward(&mut tape, x);
                let loss = tape.softmax_cross_entropy(logits, &[1.0, 0.0]);
                tape.backward(loss, &mut store);
                adam.step(&mut store).unwrap();
            }
            store.iter().flat_map(|p| p.values.iter().map(|v| v.to_bits())).collect::<Vec<u64>>()
        };
        assert_eq!(run(), run());
    }
}
