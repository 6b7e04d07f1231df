//! Percentile bootstrap confidence intervals over patient-level
//! resamples.

use rand::Rng;

use crate::error::{FocusError, Result};
use crate::rng::{derive_seed, rng_from_seed};

/// Default resample count.
pub const DEFAULT_RESAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BootstrapCi {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    /// Resamples whose metric was defined.
    pub used: usize,
    /// Resamples skipped because the metric was undefined on them
    /// (e.g. a single-class AUC resample).
    pub skipped: usize,
}

/// 95% percentile CI (2.5/97.5) of a metric over `b` resamples of `n`
/// patients with replacement. The metric receives the resampled indices
/// and returns None where it is undefined; such resamples are skipped
/// and counted. Each resample draws from its own derived seed, so the
/// result is independent of evaluation order. The interval is widened to
/// include the point estimate in the rare resampling-skew case where the
/// percentiles would exclude it.
pub fn bootstrap_ci<F>(n: usize, b: usize, seed: u64, metric: F) -> Result<BootstrapCi>
where
    F: Fn(&[usize]) -> Option<f64>,
{
    if n < 10 {
        return Err(FocusError::Eval(format!(
            "bootstrap needs at least 10 patients, got {n}"
        )));
    }
    if b == 0 {
        return Err(FocusError::Eval("bootstrap needs at least one resample".into()));
    }
    let identity: Vec<usize> = (0..n).collect();
    let point = metric(&identity)
        .ok_or_else(|| FocusError::Eval("metric undefined on the full sample".into()))?;

    let mut values = Vec::with_capacity(b);
    let mut skipped = 0usize;
    let mut indices = vec![0usize; n];
    for rep in 0..b {
        let mut rng = rng_from_seed(derive_seed(seed, rep as u64));
        for slot in indices.iter_mut() {
            *slot = rng.gen_range(0..n);
        }
        match metric(&indices) {
            Some(v) => values.push(v),
            None => skipped += 1,
        }
    }
    if values.is_empty() {
        return Err(FocusError::Eval(
            "metric was undefined on every bootstrap resample".into(),
        ));
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lower = percentile(&values, 0.025).min(point);
    let upper = percentile(&values, 0.975).max(point);
    Ok(BootstrapCi { point, lower, upper, used: values.len(), skipped })
}

/// Linear-interpolation percentile of sorted values, q in [0, 1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let m = sorted.len();
    if m == 1 {
        return sorted[0];
    }
    let pos = q * (m - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}
