//! Slice-to-patient fusion: the poolers that turn a bag of per-slice
//! embeddings into one patient-level embedding.
//!
//! Six kinds are supported. Mean and Max are parameter-free baselines.
//! Attention scores each slice with e_i = v . tanh(W h_i) and softmaxes;
//! GatedAttention multiplies in a sigmoid gate before the score. UAAC
//! (uncertainty-adaptive attention) reweights the attention softmax by
//! per-slice certainty: with slice posterior p_i,
//!
//!   c_i = 1 - H(p_i) / ln K
//!   u_i = exp(e_i - max_j e_j) * (c_i + eps)
//!   w_i = u_i / sum_j u_j
//!   z   = sum_i w_i h_i
//!
//! Certainties are constants in the backward pass: the bag loss must not
//! be able to inflate its own weights by faking slice confidence, so no
//! gradient flows into the posterior branch. With uncertainty disabled
//! the boost drops out and UAAC is exactly Attention.
//!
//! ClassQuery attends with one learned query per class over the raw
//! embeddings, w^k = softmax_i(q_k . h_i), and pools one embedding per
//! class; the reported single z and weights are the across-class means.
//!
//! Poolers are immutable after construction; [`Aggregator::pool`] is a
//! pure function of (params, inputs) and is safe to call from many
//! threads over a shared store.

use serde::{Deserialize, Serialize};

use crate::diffkernel::tape::{softmax_slice, Tape, Var, PROB_CLAMP};
use crate::diffkernel::ParamStore;
use crate::error::{FocusError, Result};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AggregatorKind {
    Mean,
    Max,
    Attention,
    GatedAttention,
    ClassQuery,
    UAAC,
}

/// Architecture of one pooler. `hidden_dim` is the attention hidden
/// width L (unused by Mean/Max/ClassQuery); `n_classes` sizes the
/// ClassQuery query set and the UAAC certainty normalizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregatorSpec {
    pub kind: AggregatorKind,
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "default_certainty_floor")]
    pub certainty_floor: f64,
    #[serde(default = "default_uncertainty_enabled")]
    pub uncertainty_enabled: bool,
    pub n_classes: usize,
}

fn default_hidden_dim() -> usize {
    64
}

fn default_certainty_floor() -> f64 {
    0.01
}

fn default_uncertainty_enabled() -> bool {
    true
}

impl AggregatorSpec {
    pub fn new(kind: AggregatorKind, n_classes: usize) -> Self {
        Self {
            kind,
            hidden_dim: default_hidden_dim(),
            certainty_floor: default_certainty_floor(),
            uncertainty_enabled: default_uncertainty_enabled(),
            n_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.certainty_floor > 0.0) {
            return Err(FocusError::Spec("certainty_floor must be positive".into()));
        }
        if self.hidden_dim == 0 {
            return Err(FocusError::Spec("hidden_dim must be at least 1".into()));
        }
        match self.kind {
            AggregatorKind::ClassQuery if self.n_classes == 0 => {
                Err(FocusError::Spec("ClassQuery needs at least one class".into()))
            }
            AggregatorKind::UAAC if self.uncertainty_enabled && self.n_classes < 2 => {
                Err(FocusError::Spec("UAAC certainty needs at least 2 classes".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Everything one pooling pass reports. `certainties` is all ones for
/// kinds without an uncertainty branch; `attention_scores` is all zeros
/// for the score-free kinds (Mean, Max). Max pooling reports uniform
/// weights by convention (its selection is per-coordinate, not
/// per-slice). ClassQuery additionally carries the per-class pooled
/// embeddings and weight rows.
#[derive(Debug, Clone)]
pub struct AggregationResult {
    pub z: Vec<f64>,
    pub weights: Vec<f64>,
    pub certainties: Vec<f64>,
    pub attention_scores: Vec<f64>,
    pub class_embeddings: Option<Vec<Vec<f64>>>,
    pub class_weights: Option<Vec<Vec<f64>>>,
}

/// Per-slice certainty: 1 - H(p)/ln K, clamped into [0, 1].
pub fn certainty(p: &[f64], n_classes: usize) -> Result<f64> {
    if n_classes < 2 {
        return Err(FocusError::Validation("certainty needs K >= 2".into()));
    }
    check_stochastic(p, n_classes)?;
    let h: f64 = p.iter().map(|&pi| -pi * pi.clamp(PROB_CLAMP, 1.0).ln()).sum();
    Ok((1.0 - h / (n_classes as f64).ln()).clamp(0.0, 1.0))
}

fn check_stochastic(p: &[f64], n_classes: usize) -> Result<()> {
    if p.len() != n_classes {
        return Err(FocusError::Validation(format!(
            "posterior has {} entries, expected {n_classes}",
            p.len()
        )));
    }
    if p.iter().any(|&v| !(0.0..=1.0 + 1e-9).contains(&v)) {
        return Err(FocusError::Validation("posterior entries must lie in [0, 1]".into()));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(FocusError::Validation(format!(
            "posterior sums to {sum}, expected 1"
        )));
    }
    Ok(())
}

/// Certainty-boosted softmax over raw attention scores. `boost_i` is
/// (c_i + eps); scores are max-subtracted so magnitudes up to 1e4 are
/// safe.
pub fn uaac_weights(scores: &[f64], certainties: &[f64], eps: f64) -> Vec<f64> {
    assert_eq!(scores.len(), certainties.len());
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let u: Vec<f64> = scores
        .iter()
        .zip(certainties)
        .map(|(&e, &c)| (e - m).exp() * (c + eps))
        .collect();
    let sum: f64 = u.iter().sum();
    u.iter().map(|&x| x / sum).collect()
}

#[derive(Debug, Clone)]
enum AggParams {
    None,
    Attention { w: usize, v: usize },
    Gated { w: usize, u: usize, v: usize },
    ClassQuery { queries: Vec<usize> },
}

/// A registered pooler: spec plus parameter keys in some store.
#[derive(Debug, Clone)]
pub struct Aggregator {
    spec: AggregatorSpec,
    input_dim: usize,
    params: AggParams,
}

impl Aggregator {
    /// Register this pooler's parameters (Glorot weights) under
    /// `prefix.*`. `input_dim` is the embedding width the pooler will
    /// consume.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        spec: &AggregatorSpec,
        input_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let l = spec.hidden_dim;
        let params = match spec.kind {
            AggregatorKind::Mean | AggregatorKind::Max => AggParams::None,
            AggregatorKind::Attention | AggregatorKind::UAAC => AggParams::Attention {
                w: store.add_glorot(&format!("{prefix}.att.w"), l, input_dim, rng)?,
                v: store.add_glorot(&format!("{prefix}.att.v"), 1, l, rng)?,
            },
            AggregatorKind::GatedAttention => AggParams::Gated {
                w: store.add_glorot(&format!("{prefix}.att.w"), l, input_dim, rng)?,
                u: store.add_glorot(&format!("{prefix}.att.u"), l, input_dim, rng)?,
                v: store.add_glorot(&format!("{prefix}.att.v"), 1, l, rng)?,
            },
            AggregatorKind::ClassQuery => {
                let queries = (0..spec.n_classes)
                    .map(|k| store.add_glorot(&format!("{prefix}.query{k}"), 1, input_dim, rng))
                    .collect::<Result<Vec<_>>>()?;
                AggParams::ClassQuery { queries }
            }
        };
        Ok(Self { spec: *spec, input_dim, params })
    }

    pub fn spec(&self) -> &AggregatorSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn check_bag(&self, h: &[Vec<f64>]) -> Result<()> {
        if h.is_empty() {
            return Err(FocusError::Validation("cannot pool an empty bag".into()));
        }
        if h.iter().any(|row| row.len() != self.input_dim) {
            return Err(FocusError::Validation(format!(
                "bag rows must all have width {}",
                self.input_dim
            )));
        }
        Ok(())
    }

    /// Per-slice certainties (c_i, NOT including the floor) for a bag of
    /// posteriors, validated row by row.
    pub fn certainties(&self, posteriors: &[Vec<f64>]) -> Result<Vec<f64>> {
        posteriors.iter().map(|p| certainty(p, self.spec.n_classes)).collect()
    }

    /// Pure pooling forward pass. `posteriors` is required exactly when
    /// kind is UAAC with uncertainty enabled, one row-stochastic row per
    /// slice.
    pub fn pool(
        &self,
        store: &ParamStore,
        h: &[Vec<f64>],
        posteriors: Option<&[Vec<f64>]>,
    ) -> Result<AggregationResult> {
        self.check_bag(h)?;
        let n = h.len();
        let d = self.input_dim;
        let uniform = vec![1.0 / n as f64; n];
        match (&self.spec.kind, &self.params) {
            (AggregatorKind::Mean, _) => {
                Ok(self.result(weighted_sum(&uniform, h), uniform, vec![1.0; n], vec![0.0; n]))
            }
            (AggregatorKind::Max, _) => {
                let mut z = h[0].clone();
                for row in &h[1..] {
                    for j in 0..d {
                        if row[j] > z[j] {
                            z[j] = row[j];
                        }
                    }
                }
                Ok(self.result(z, uniform, vec![1.0; n], vec![0.0; n]))
            }
            (AggregatorKind::Attention, AggParams::Attention { w, v }) => {
                let scores = self.plain_scores(store, h, *w, *v);
                let weights = softmax_slice(&scores);
                Ok(self.result(weighted_sum(&weights, h), weights, vec![1.0; n], scores))
            }
            (AggregatorKind::GatedAttention, AggParams::Gated { w, u, v }) => {
                let scores = self.gated_scores(store, h, *w, *u, *v);
                let weights = softmax_slice(&scores);
                Ok(self.result(weighted_sum(&weights, h), weights, vec![1.0; n], scores))
            }
            (AggregatorKind::UAAC, AggParams::Attention { w, v }) => {
                let scores = self.plain_scores(store, h, *w, *v);
                if self.spec.uncertainty_enabled {
                    let posteriors = posteriors.ok_or_else(|| {
                        FocusError::Validation(
                            "UAAC with uncertainty enabled needs slice posteriors".into(),
                        )
                    })?;
                    if posteriors.len() != n {
                        return Err(FocusError::Validation(format!(
                            "got {} posterior rows for {n} slices",
                            posteriors.len()
                        )));
                    }
                    let certainties = self.certainties(posteriors)?;
                    let weights = uaac_weights(&scores, &certainties, self.spec.certainty_floor);
                    Ok(self.result(weighted_sum(&weights, h), weights, certainties, scores))
                } else {
                    let weights = softmax_slice(&scores);
                    Ok(self.result(weighted_sum(&weights, h), weights, vec![1.0; n], scores))
                }
            }
            (AggregatorKind::ClassQuery, AggParams::ClassQuery { queries }) => {
                let mut class_weights = Vec::with_capacity(queries.len());
                let mut class_embeddings = Vec::with_capacity(queries.len());
                for &q in queries {
                    let qv = &store.get(q).values;
                    let scores: Vec<f64> =
                        h.iter().map(|row| row.iter().zip(qv).map(|(a, b)| a * b).sum()).collect();
                    let wk = softmax_slice(&scores);
                    class_embeddings.push(weighted_sum(&wk, h));
                    class_weights.push(wk);
                }
                let k = queries.len() as f64;
                let mut weights = vec![0.0; n];
                for wk in &class_weights {
                    for (acc, &w) in weights.iter_mut().zip(wk) {
                        *acc += w / k;
                    }
                }
                let mut z = vec![0.0; d];
                for zk in &class_embeddings {
                    for (acc, &v) in z.iter_mut().zip(zk) {
                        *acc += v / k;
                    }
                }
                Ok(AggregationResult {
                    z,
                    weights,
                    certainties: vec![1.0; n],
                    attention_scores: vec![0.0; n],
                    class_embeddings: Some(class_embeddings),
                    class_weights: Some(class_weights),
                })
            }
            _ => unreachable!("params match the kind by construction"),
        }
    }

    fn result(
        &self,
        z: Vec<f64>,
        weights: Vec<f64>,
        certainties: Vec<f64>,
        attention_scores: Vec<f64>,
    ) -> AggregationResult {
        AggregationResult {
            z,
            weights,
            certainties,
            attention_scores,
            class_embeddings: None,
            class_weights: None,
        }
    }

    fn plain_scores(&self, store: &ParamStore, h: &[Vec<f64>], w: usize, v: usize) -> Vec<f64> {
        let wv = &store.get(w).values;
        let vv = &store.get(v).values;
        let l = self.spec.hidden_dim;
        let d = self.input_dim;
        h.iter()
            .map(|row| {
                (0..l)
                    .map(|r| {
                        let dot: f64 =
                            wv[r * d..(r + 1) * d].iter().zip(row).map(|(a, b)| a * b).sum();
                        vv[r] * dot.tanh()
                    })
                    .sum()
            })
            .collect()
    }

    fn gated_scores(
        &self,
        store: &ParamStore,
        h: &[Vec<f64>],
        w: usize,
        u: usize,
        v: usize,
    ) -> Vec<f64> {
        let wv = &store.get(w).values;
        let uv = &store.get(u).values;
        let vv = &store.get(v).values;
        let l = self.spec.hidden_dim;
        let d = self.input_dim;
        h.iter()
            .map(|row| {
                (0..l)
                    .map(|r| {
                        let a: f64 =
                            wv[r * d..(r + 1) * d].iter().zip(row).map(|(x, y)| x * y).sum();
                        let g: f64 =
                            uv[r * d..(r + 1) * d].iter().zip(row).map(|(x, y)| x * y).sum();
                        vv[r] * a.tanh() * (1.0 / (1.0 + (-g).exp()))
                    })
                    .sum()
            })
            .collect()
    }

    /// Create this pooler's parameter leaves on a tape.
    pub fn bind<'a>(&'a self, tape: &mut Tape, store: &ParamStore) -> BoundAggregator<'a> {
        let params = match &self.params {
            AggParams::None => BoundParams::None,
            AggParams::Attention { w, v } => BoundParams::Attention {
                w: tape.param(store, *w),
                v: tape.param(store, *v),
            },
            AggParams::Gated { w, u, v } => BoundParams::Gated {
                w: tape.param(store, *w),
                u: tape.param(store, *u),
                v: tape.param(store, *v),
            },
            AggParams::ClassQuery { queries } => {
                BoundParams::ClassQuery {
                    queries: queries.iter().map(|&q| tape.param(store, q)).collect(),
                }
            }
        };
        BoundAggregator { agg: self, params }
    }
}

/// Plain weighted sum of rows.
fn weighted_sum(weights: &[f64], h: &[Vec<f64>]) -> Vec<f64> {
    let d = h[0].len();
    let mut z = vec![0.0; d];
    for (w, row) in weights.iter().zip(h) {
        for (zj, &v) in z.iter_mut().zip(row) {
            *zj += w * v;
        }
    }
    z
}

enum BoundParams {
    None,
    Attention { w: Var, v: Var },
    Gated { w: Var, u: Var, v: Var },
    ClassQuery { queries: Vec<Var> },
}

/// Differentiable pooling graph over already-bound parameters. Certainty
/// boosts enter as constants (stop-gradient).
pub struct BoundAggregator<'a> {
    agg: &'a Aggregator,
    params: BoundParams,
}

/// Tape handles produced by one pooling graph.
pub struct PooledGraph {
    pub z: Var,
    pub weights: Var,
    pub class_embeddings: Option<Vec<Var>>,
}

impl BoundAggregator<'_> {
    /// Build the pooling graph over per-slice embedding nodes. `boost`
    /// must be Some((c_i + eps) per slice) exactly when the pooler is
    /// UAAC with uncertainty enabled; the caller computes certainties
    /// from slice posteriors outside the tape.
    pub fn pool_graph(&self, tape: &mut Tape, h: &[Var], boost: Option<&[f64]>) -> PooledGraph {
        assert!(!h.is_empty(), "cannot pool an empty bag");
        let n = h.len();
        let l = self.agg.spec.hidden_dim;
        let d = self.agg.input_dim;
        match (&self.agg.spec.kind, &self.params) {
            (AggregatorKind::Mean, _) => {
                let c = 1.0 / n as f64;
                let terms: Vec<(f64, Var)> = h.iter().map(|&hi| (c, hi)).collect();
                let z = tape.lincomb(&terms);
                let weights = tape.constant(vec![c; n]);
                PooledGraph { z, weights, class_embeddings: None }
            }
            (AggregatorKind::Max, _) => {
                let z = tape.max_pool(h);
                let weights = tape.constant(vec![1.0 / n as f64; n]);
                PooledGraph { z, weights, class_embeddings: None }
            }
            (AggregatorKind::Attention, BoundParams::Attention { w, v }) => {
                let scores = self.plain_score_nodes(tape, h, *w, *v, l, d);
                let stacked = tape.stack(&scores);
                let weights = tape.softmax(stacked);
                let z = tape.weighted_sum(weights, h);
                PooledGraph { z, weights, class_embeddings: None }
            }
            (AggregatorKind::GatedAttention, BoundParams::Gated { w, u, v }) => {
                let scores: Vec<Var> = h
                    .iter()
                    .map(|&hi| {
                        let a = tape.matvec(*w, hi, l, d);
                        let ta = tape.tanh(a);
                        let g = tape.matvec(*u, hi, l, d);
                        let sg = tape.sigmoid(g);
                        let gated = tape.mul_elem(ta, sg);
                        tape.dot(*v, gated)
                    })
                    .collect();
                let stacked = tape.stack(&scores);
                let weights = tape.softmax(stacked);
                let z = tape.weighted_sum(weights, h);
                PooledGraph { z, weights, class_embeddings: None }
            }
            (AggregatorKind::UAAC, BoundParams::Attention { w, v }) => {
                let scores = self.plain_score_nodes(tape, h, *w, *v, l, d);
                let stacked = tape.stack(&scores);
                let weights = if self.agg.spec.uncertainty_enabled {
                    let boost = boost.expect("UAAC with uncertainty enabled needs boosts");
                    tape.boosted_softmax(stacked, boost)
                } else {
                    tape.softmax(stacked)
                };
                let z = tape.weighted_sum(weights, h);
                PooledGraph { z, weights, class_embeddings: None }
            }
            (AggregatorKind::ClassQuery, BoundParams::ClassQuery { queries }) => {
                let mut class_embeddings = Vec::with_capacity(queries.len());
                let mut all_weights = Vec::with_capacity(queries.len());
                for &q in queries {
                    let scores: Vec<Var> = h.iter().map(|&hi| tape.dot(q, hi)).collect();
                    let stacked = tape.stack(&scores);
                    let wk = tape.softmax(stacked);
                    class_embeddings.push(tape.weighted_sum(wk, h));
                    all_weights.push(wk);
                }
                let ck = 1.0 / queries.len() as f64;
                let zterms: Vec<(f64, Var)> = class_embeddings.iter().map(|&zk| (ck, zk)).collect();
                let z = tape.lincomb(&zterms);
                let wterms: Vec<(f64, Var)> = all_weights.iter().map(|&wk| (ck, wk)).collect();
                let weights = tape.lincomb(&wterms);
                PooledGraph { z, weights, class_embeddings: Some(class_embeddings) }
            }
            _ => unreachable!("params match the kind by construction"),
        }
    }

    fn plain_score_nodes(
        &self,
        tape: &mut Tape,
        h: &[Var],
        w: Var,
        v: Var,
        l: usize,
        d: usize,
    ) -> Vec<Var> {
        h.iter()
            .map(|&hi| {
                let a = tape.matvec(w, hi, l, d);
                let ta = tape.tanh(a);
                tape.dot(v, ta)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkernel::gradcheck::grad_check;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng;

    const ALL_KINDS: [AggregatorKind; 6] = [
        AggregatorKind::Mean,
        AggregatorKind::Max,
        AggregatorKind::Attention,
        AggregatorKind::GatedAttention,
        AggregatorKind::ClassQuery,
        AggregatorKind::UAAC,
    ];

    fn make(kind: AggregatorKind, d: usize, seed: u64) -> (ParamStore, Aggregator) {
        let mut store = ParamStore::new();
        let mut spec = AggregatorSpec::new(kind, 2);
        spec.hidden_dim = 4;
        let mut rng = rng_from_seed(seed);
        let agg = Aggregator::register(&mut store, "agg", &spec, d, &mut rng).unwrap();
        (store, agg)
    }

    fn random_bag(n: usize, d: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut rng = rng_from_seed(seed);
        let h = (0..n).map(|_| (0..d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()).collect();
        let p = (0..n)
            .map(|_| {
                let a: f64 = rng.gen();
                vec![a, 1.0 - a]
            })
            .collect();
        (h, p)
    }

    #[test]
    fn certainty_reference_values() {
        assert!(certainty(&[0.25; 4], 4).unwrap().abs() < 1e-12);
        assert!((certainty(&[0.0, 1.0, 0.0], 3).unwrap() - 1.0).abs() < 1e-12);
        let c = certainty(&[0.99, 0.01], 2).unwrap();
        assert!((c - 0.9192).abs() < 1e-3, "{c}");
        assert!(certainty(&[1.0], 1).is_err());
        assert!(certainty(&[0.7, 0.7], 2).is_err());
    }

    #[test]
    fn uaac_hand_example_two_slices() {
        // Equal attention scores; posteriors [0.99, 0.01] and uniform.
        let c_a = certainty(&[0.99, 0.01], 2).unwrap();
        let c_b = certainty(&[0.5, 0.5], 2).unwrap();
        assert!(c_b.abs() < 1e-12);
        let w = uaac_weights(&[0.0, 0.0], &[c_a, c_b], 0.01);
        assert!((w[0] - 0.9894).abs() < 1e-3, "{w:?}");
        assert!((w[1] - 0.0106).abs() < 1e-3, "{w:?}");
    }

    #[test]
    fn uaac_pool_reproduces_hand_example_end_to_end() {
        // Zeroed v makes every attention score 0, isolating the
        // certainty boost.
        let (mut store, agg) = make(AggregatorKind::UAAC, 3, 1);
        let vkey = store.index_of("agg.att.v").unwrap();
        store.values_mut(vkey).iter_mut().for_each(|x| *x = 0.0);
        let h = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        let p = vec![vec![0.99, 0.01], vec![0.5, 0.5]];
        let r = agg.pool(&store, &h, Some(&p)).unwrap();
        assert!((r.weights[0] - 0.9894).abs() < 1e-3, "{:?}", r.weights);
        assert!((r.certainties[0] - 0.9192).abs() < 1e-3);
        for j in 0..3 {
            let expect = r.weights[0] * h[0][j] + r.weights[1] * h[1][j];
            assert!((r.z[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn single_slice_bag_pins_weight_for_every_kind() {
        for kind in ALL_KINDS {
            let (store, agg) = make(kind, 3, 2);
            let h = vec![vec![0.4, -1.0, 2.5]];
            let p = vec![vec![0.8, 0.2]];
            let r = agg.pool(&store, &h, Some(&p)).unwrap();
            assert_eq!(r.weights, vec![1.0], "{kind:?}");
            for (a, b) in r.z.iter().zip(&h[0]) {
                assert!((a - b).abs() < 1e-12, "{kind:?}");
            }
        }
    }

    #[test]
    fn identical_slices_give_uniform_weights() {
        for kind in [AggregatorKind::Attention, AggregatorKind::GatedAttention, AggregatorKind::UAAC]
        {
            let (store, agg) = make(kind, 3, 3);
            let h = vec![vec![0.3, 0.6, -0.2]; 5];
            let p = vec![vec![0.7, 0.3]; 5];
            let r = agg.pool(&store, &h, Some(&p)).unwrap();
            for &w in &r.weights {
                assert!((w - 0.2).abs() < 1e-12, "{kind:?}: {:?}", r.weights);
            }
        }
    }

    #[test]
    fn empty_bag_and_missing_posteriors_are_rejected() {
        let (store, agg) = make(AggregatorKind::UAAC, 3, 4);
        assert!(agg.pool(&store, &[], None).is_err());
        let h = vec![vec![0.0; 3]; 2];
        assert!(agg.pool(&store, &h, None).is_err());
        // Row that does not sum to 1.
        let bad = vec![vec![0.9, 0.3], vec![0.5, 0.5]];
        assert!(agg.pool(&store, &h, Some(&bad)).is_err());
    }

    #[test]
    fn uncertainty_disabled_reduces_to_attention_exactly() {
        let d = 5;
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(8);
        let mut spec = AggregatorSpec::new(AggregatorKind::Attention, 2);
        spec.hidden_dim = 4;
        let att = Aggregator::register(&mut store, "agg", &spec, d, &mut rng).unwrap();
        // Same parameters, reinterpreted as a UAAC pooler with the
        // uncertainty branch off.
        let mut uspec = spec;
        uspec.kind = AggregatorKind::UAAC;
        uspec.uncertainty_enabled = false;
        let uaac = Aggregator {
            spec: uspec,
            input_dim: d,
            params: AggParams::Attention {
                w: store.index_of("agg.att.w").unwrap(),
                v: store.index_of("agg.att.v").unwrap(),
            },
        };
        for trial in 0..50 {
            let (h, _) = random_bag(1 + trial % 7, d, 100 + trial as u64);
            let ra = att.pool(&store, &h, None).unwrap();
            let ru = uaac.pool(&store, &h, None).unwrap();
            for (a, b) in ra.weights.iter().zip(&ru.weights) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in ra.z.iter().zip(&ru.z) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_with_zero_v_is_uniform() {
        let (mut store, agg) = make(AggregatorKind::Attention, 4, 9);
        let vkey = store.index_of("agg.att.v").unwrap();
        store.values_mut(vkey).iter_mut().for_each(|x| *x = 0.0);
        let (h, _) = random_bag(6, 4, 5);
        let r = agg.pool(&store, &h, None).unwrap();
        for &w in &r.weights {
            assert!((w - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn huge_scores_stay_finite_and_normalized() {
        let w = uaac_weights(&[1e4, -1e4, 0.0], &[0.5, 0.5, 0.5], 0.01);
        assert!(w.iter().all(|x| x.is_finite()));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(w[0] > 0.999);
        let s = softmax_slice(&[1e4, 1e4]);
        assert_eq!(s, vec![0.5, 0.5]);
    }

    #[test]
    fn pool_graph_agrees_with_plain_pool_for_every_kind() {
        for kind in ALL_KINDS {
            let (store, agg) = make(kind, 4, 20);
            let (h, p) = random_bag(5, 4, 21);
            let plain = agg.pool(&store, &h, Some(&p)).unwrap();
            let mut tape = Tape::new();
            let bound = agg.bind(&mut tape, &store);
            let hv: Vec<Var> = h.iter().map(|row| tape.constant(row.clone())).collect();
            let boost: Option<Vec<f64>> =
                if kind == AggregatorKind::UAAC && agg.spec().uncertainty_enabled {
                    Some(
                        agg.certainties(&p)
                            .unwrap()
                            .iter()
                            .map(|c| c + agg.spec().certainty_floor)
                            .collect(),
                    )
                } else {
                    None
                };
            let g = bound.pool_graph(&mut tape, &hv, boost.as_deref());
            for (a, b) in tape.value(g.z).iter().zip(&plain.z) {
                assert!((a - b).abs() < 1e-12, "{kind:?} z");
            }
            for (a, b) in tape.value(g.weights).iter().zip(&plain.weights) {
                assert!((a - b).abs() < 1e-12, "{kind:?} weights");
            }
        }
    }

    #[test]
    fn mean_gradient_splits_upstream_evenly() {
        let n = 4;
        let d = 3;
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(30);
        let hkeys: Vec<usize> = (0..n)
            .map(|i| {
                let vals = (0..d).map(|_| rng.gen::<f64>()).collect();
                store.add(&format!("h{i}"), &[d], vals).unwrap()
            })
            .collect();
        let spec = AggregatorSpec::new(AggregatorKind::Mean, 2);
        let agg = Aggregator::register(&mut store, "agg", &spec, d, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = agg.bind(&mut tape, &store);
        let hv: Vec<Var> = hkeys.iter().map(|&k| tape.param(&store, k)).collect();
        let g = bound.pool_graph(&mut tape, &hv, None);
        let c = tape.constant(vec![2.0, -1.0, 0.5]);
        let loss = tape.dot(g.z, c);
        tape.backward(loss, &mut store);
        for &k in &hkeys {
            let grad = &store.get(k).grad;
            let expect = [2.0 / 4.0, -1.0 / 4.0, 0.5 / 4.0];
            for (a, b) in grad.iter().zip(expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_v_gradient_vanishes_for_single_slice() {
        let (mut store, agg) = make(AggregatorKind::Attention, 3, 31);
        let mut tape = Tape::new();
        let bound = agg.bind(&mut tape, &store);
        let h0 = tape.constant(vec![0.5, -0.4, 1.2]);
        let g = bound.pool_graph(&mut tape, &[h0], None);
        let c = tape.constant(vec![1.0, 1.0, 1.0]);
        let loss = tape.dot(g.z, c);
        tape.backward(loss, &mut store);
        let vkey = store.index_of("agg.att.v").unwrap();
        assert!(store.get(vkey).grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn uaac_gradients_pass_fd_with_frozen_certainties() {
        // The boost vector is captured once: the analytic pass treats
        // certainties as constants, so the probe must too.
        let (mut store, agg) = make(AggregatorKind::UAAC, 4, 32);
        let (h, p) = random_bag(4, 4, 33);
        let boost: Vec<f64> = agg
            .certainties(&p)
            .unwrap()
            .iter()
            .map(|c| c + agg.spec().certainty_floor)
            .collect();
        let proj = vec![1.0, -2.0, 0.5, 0.7];
        let err = grad_check(&mut store, |tape, store| {
            let bound = agg.bind(tape, store);
            let hv: Vec<Var> = h.iter().map(|row| tape.constant(row.clone())).collect();
            let g = bound.pool_graph(tape, &hv, Some(&boost));
            let c = tape.constant(proj.clone());
            tape.dot(g.z, c)
        });
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn gated_and_classquery_gradients_pass_fd() {
        for kind in [AggregatorKind::GatedAttention, AggregatorKind::ClassQuery] {
            let (mut store, agg) = make(kind, 4, 34);
            let (h, _) = random_bag(4, 4, 35);
            let proj = vec![0.3, 1.0, -0.8, 0.2];
            let err = grad_check(&mut store, |tape, store| {
                let bound = agg.bind(tape, store);
                let hv: Vec<Var> = h.iter().map(|row| tape.constant(row.clone())).collect();
                let g = bound.pool_graph(tape, &hv, None);
                let c = tape.constant(proj.clone());
                tape.dot(g.z, c)
            });
            assert!(err < 1e-4, "{kind:?}: max relative error {err}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn permuting_slices_permutes_weights_and_preserves_z(
            seed in 0u64..1000,
            n in 1usize..16,
            kind_idx in 0usize..6,
        ) {
            let kind = ALL_KINDS[kind_idx];
            let d = 4;
            let (store, agg) = make(kind, d, seed);
            let (h, p) = random_bag(n, d, seed + 5000);
            let base = agg.pool(&store, &h, Some(&p)).unwrap();

            // Deterministic rotation keeps the test reproducible.
            let shift = (seed as usize % n.max(1)).max(if n > 1 { 1 } else { 0 });
            let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
            let hp: Vec<Vec<f64>> = perm.iter().map(|&i| h[i].clone()).collect();
            let pp: Vec<Vec<f64>> = perm.iter().map(|&i| p[i].clone()).collect();
            let permuted = agg.pool(&store, &hp, Some(&pp)).unwrap();

            for (j, &i) in perm.iter().enumerate() {
                prop_assert!((permuted.weights[j] - base.weights[i]).abs() < 1e-9);
            }
            for (a, b) in permuted.z.iter().zip(&base.z) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn weights_always_normalize(
            seed in 0u64..1000,
            n in 1usize..16,
            kind_idx in 0usize..6,
        ) {
            let kind = ALL_KINDS[kind_idx];
            let (store, agg) = make(kind, 4, seed);
            let (h, p) = random_bag(n, 4, seed + 9000);
            let r = agg.pool(&store, &h, Some(&p)).unwrap();
            let total: f64 = r.weights.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(r.weights.iter().all(|&w| w >= 0.0));
            prop_assert!(r.certainties.iter().all(|&c| (0.0..=1.0).contains(&c)));
        }

        #[test]
        fn raising_certainty_strictly_raises_uaac_weight(
            seed in 0u64..1000,
            n in 2usize..12,
            target in 0usize..12,
            bump in 0.05f64..0.5,
        ) {
            let target = target % n;
            let mut rng = rng_from_seed(seed);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let certs: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 0.5).collect();
            let before = uaac_weights(&scores, &certs, 0.01);
            let mut raised = certs.clone();
            raised[target] = (raised[target] + bump).min(1.0);
            prop_assume!(raised[target] > certs[target]);
            let after = uaac_weights(&scores, &raised, 0.01);
            prop_assert!(after[target] > before[target]);
        }
    }
}
