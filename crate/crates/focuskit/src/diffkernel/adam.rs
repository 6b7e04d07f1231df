//! Adam with standard bias correction.

use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{FocusError, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled shrinkage per step, scaled by the current learning rate.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Optimizer state: first and second moment estimates aligned with the
/// store's parameter layout at construction.
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let m = store.iter().map(|p| vec![0.0; p.len()]).collect();
        let v = store.iter().map(|p| vec![0.0; p.len()]).collect();
        Self { cfg, t: 0, m, v }
    }

    /// One update from the gradients currently accumulated in the store.
    /// Rejects non-finite gradients by parameter name before touching any
    /// value, so a failed step leaves the model intact.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for p in store.iter() {
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(FocusError::Training(format!(
                    "non-finite gradient in param {}",
                    p.name
                )));
            }
        }
        self.t += 1;
        let t = self.t as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for (pi, p) in store.iter_mut().enumerate() {
            for j in 0..p.values.len() {
                let g = p.grad[j];
                let m = &mut self.m[pi][j];
                let v = &mut self.v[pi][j];
                *m = self.cfg.beta1 * *m + (1.0 - self.cfg.beta1) * g;
                *v = self.cfg.beta2 * *v + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                p.values[j] -= self.cfg.lr
                    * (m_hat / (v_hat.sqrt() + self.cfg.eps)
                        + self.cfg.weight_decay * p.values[j]);
            }
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Replaces the learning rate; moment estimates and the bias-correction
    /// counter carry over, so schedules can retune between steps.
    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param_store(value: f64) -> ParamStore {
        let mut store = ParamStore::new();
        store.add("w", &[1], vec![value]).unwrap();
        store
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut store = single_param_store(5.0);
        store.grad_mut(0)[0] = 1.0;
        let mut adam = Adam::new(AdamConfig::with_lr(0.001), &store);
        adam.step(&mut store).unwrap();
        let moved = 5.0 - store.get(0).values[0];
        assert!((moved - 0.001).abs() < 1e-6, "moved {moved}");
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = single_param_store(5.0);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store).unwrap();
        assert_eq!(store.get(0).values[0], 5.0);
    }

    #[test]
    fn first_step_size_is_gradient_scale_invariant() {
        // Bias correction makes m_hat / sqrt(v_hat) = sign(g) at t = 1.
        let mut small = single_param_store(0.0);
        small.grad_mut(0)[0] = 1.0;
        let mut big = single_param_store(0.0);
        big.grad_mut(0)[0] = 100.0;
        let cfg = AdamConfig::with_lr(0.01);
        Adam::new(cfg, &small).step(&mut small).unwrap();
        let mut adam_big = Adam::new(cfg, &big);
        adam_big.step(&mut big).unwrap();
        let step_small = -small.get(0).values[0];
        let step_big = -big.get(0).values[0];
        assert!((step_small - step_big).abs() < 1e-6, "{step_small} vs {step_big}");
    }

    #[test]
    fn non_finite_gradient_is_rejected_with_param_name() {
        let mut store = single_param_store(1.0);
        store.grad_mut(0)[0] = f64::NAN;
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let err = adam.step(&mut store).unwrap_err();
        assert!(err.to_string().contains('w'), "{err}");
        assert_eq!(store.get(0).values[0], 1.0);
    }

    #[test]
    fn weight_decay_shrinks_even_with_zero_gradient() {
        let mut store = single_param_store(2.0);
        let cfg = AdamConfig { lr: 0.1, weight_decay: 0.5, ..AdamConfig::default() };
        let mut adam = Adam::new(cfg, &store);
        adam.step(&mut store).unwrap();
        let got = store.get(0).values[0];
        assert!((got - 1.9).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn set_lr_scales_the_next_step() {
        let mut store = single_param_store(0.0);
        store.grad_mut(0)[0] = 1.0;
        let mut adam = Adam::new(AdamConfig::with_lr(0.01), &store);
        adam.set_lr(0.002);
        adam.step(&mut store).unwrap();
        // At t = 1 bias correction gives a unit-magnitude direction.
        let moved = -store.get(0).values[0];
        assert!((moved - 0.002).abs() < 1e-8, "moved {moved}");
    }

    #[test]
    fn repeated_steps_descend_a_quadratic() {
        // loss = 0.5 w^2, gradient w; Adam should walk w toward 0.
        let mut store = single_param_store(3.0);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &store);
        for _ in 0..200 {
            let w = store.get(0).values[0];
            store.zero_grad();
            store.grad_mut(0)[0] = w;
            adam.step(&mut store).unwrap();
        }
        assert!(store.get(0).values[0].abs() < 0.1);
    }
}
