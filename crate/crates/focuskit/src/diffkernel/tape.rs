//! Reverse-mode autodiff over vector-valued nodes.
//!
//! Building the graph IS the forward pass: every constructor computes its
//! value eagerly, so a freshly built node can be read immediately via
//! [`Tape::value`]. [`Tape::backward`] walks the nodes in reverse creation
//! order and accumulates parameter gradients into the [`ParamStore`] the
//! graph was built against. Shape mismatches are construction bugs, not
//! runtime conditions, and panic.

use super::ParamStore;

/// Handle to one node of a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf { param: Option<usize> },
    Affine { w: Var, b: Var, x: Var, rows: usize, cols: usize },
    MatVec { m: Var, x: Var, rows: usize, cols: usize },
    Relu { x: Var },
    Tanh { x: Var },
    Sigmoid { x: Var },
    MulElem { a: Var, b: Var },
    Dot { a: Var, b: Var },
    Stack { parts: Vec<Var> },
    Softmax { x: Var },
    /// softmax(x + ln(boost)) with `boost` treated as a constant, so the
    /// backward pass is exactly the softmax Jacobian. This is how
    /// certainty weighting stays outside the gradient.
    BoostedSoftmax { x: Var },
    WeightedSum { weights: Var, items: Vec<Var> },
    LinComb { terms: Vec<(f64, Var)> },
    MaxPool { items: Vec<Var>, winners: Vec<usize> },
    /// Fused softmax + cross-entropy against a fixed target distribution;
    /// stores the softmax output for the backward pass.
    SoftmaxXent { logits: Var, target: Vec<f64>, probs: Vec<f64> },
    Entropy { probs: Var },
}

struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Probability floor applied before any logarithm.
pub const PROB_CLAMP: f64 = 1e-12;

/// Plain (non-differentiable) cross-entropy: -ln p[y] with the
/// probability clamped to [PROB_CLAMP, 1].
pub fn cross_entropy(p: &[f64], y: usize) -> crate::error::Result<f64> {
    if y >= p.len() {
        return Err(crate::error::FocusError::Eval(format!(
            "class index {y} out of range for {} probabilities",
            p.len()
        )));
    }
    Ok(-p[y].clamp(PROB_CLAMP, 1.0).ln())
}

/// Numerically stable softmax of a plain slice (max-subtracted).
pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; receives no gradient.
    pub fn constant(&mut self, values: Vec<f64>) -> Var {
        assert!(values.iter().all(|v| v.is_finite()), "non-finite constant");
        self.push(values, Op::Leaf { param: None })
    }

    /// Parameter leaf bound to `store` entry `key`. Bind each parameter
    /// once per tape and reuse the Var, so gradient contributions from
    /// every use accumulate.
    pub fn param(&mut self, store: &ParamStore, key: usize) -> Var {
        self.push(store.get(key).values.clone(), Op::Leaf { param: Some(key) })
    }

    /// y = W x + b with W given row-major as rows x cols.
    pub fn affine(&mut self, w: Var, b: Var, x: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(self.nodes[w.0].value.len(), rows * cols, "affine: W size");
        assert_eq!(self.nodes[b.0].value.len(), rows, "affine: b size");
        assert_eq!(self.nodes[x.0].value.len(), cols, "affine: x size");
        let wv = &self.nodes[w.0].value;
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[b.0].value;
        let mut y = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &wv[r * cols..(r + 1) * cols];
            let dot: f64 = row.iter().zip(xv).map(|(a, b)| a * b).sum();
            y.push(dot + bv[r]);
        }
        self.push(y, Op::Affine { w, b, x, rows, cols })
    }

    /// y = M x without a bias term.
    pub fn matvec(&mut self, m: Var, x: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(self.nodes[m.0].value.len(), rows * cols, "matvec: M size");
        assert_eq!(self.nodes[x.0].value.len(), cols, "matvec: x size");
        let mv = &self.nodes[m.0].value;
        let xv = &self.nodes[x.0].value;
        let y = (0..rows)
            .map(|r| mv[r * cols..(r + 1) * cols].iter().zip(xv).map(|(a, b)| a * b).sum())
            .collect();
        self.push(y, Op::MatVec { m, x, rows, cols })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.nodes[x.0].value.iter().map(|&v| v.max(0.0)).collect();
        self.push(y, Op::Relu { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.nodes[x.0].value.iter().map(|&v| v.tanh()).collect();
        self.push(y, Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.nodes[x.0].value.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        self.push(y, Op::Sigmoid { x })
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.len(), bv.len(), "mul_elem: length mismatch");
        let y = av.iter().zip(bv).map(|(x, y)| x * y).collect();
        self.push(y, Op::MulElem { a, b })
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.len(), bv.len(), "dot: length mismatch");
        let y = av.iter().zip(bv).map(|(x, y)| x * y).sum();
        self.push(vec![y], Op::Dot { a, b })
    }

    /// Concatenate any number of nodes into one vector.
    pub fn stack(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "stack: empty");
        let mut value = Vec::new();
        for p in parts {
            value.extend_from_slice(&self.nodes[p.0].value);
        }
        self.push(value, Op::Stack { parts: parts.to_vec() })
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let y = softmax_slice(&self.nodes[x.0].value);
        self.push(y, Op::Softmax { x })
    }

    /// w_i proportional to exp(x_i - max x) * boost_i, with strictly
    /// positive constant boosts. Gradient w.r.t. x equals the softmax
    /// Jacobian; the boosts receive none.
    pub fn boosted_softmax(&mut self, x: Var, boost: &[f64]) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.len(), boost.len(), "boosted_softmax: length mismatch");
        assert!(boost.iter().all(|&b| b > 0.0 && b.is_finite()), "boosts must be positive");
        let m = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let u: Vec<f64> = xv.iter().zip(boost).map(|(&v, &b)| (v - m).exp() * b).collect();
        let sum: f64 = u.iter().sum();
        let y = u.iter().map(|&e| e / sum).collect();
        self.push(y, Op::BoostedSoftmax { x })
    }

    /// z = sum_i weights[i] * items[i], items all the same length.
    pub fn weighted_sum(&mut self, weights: Var, items: &[Var]) -> Var {
        let wv = &self.nodes[weights.0].value;
        assert_eq!(wv.len(), items.len(), "weighted_sum: arity mismatch");
        assert!(!items.is_empty(), "weighted_sum: empty");
        let dim = self.nodes[items[0].0].value.len();
        let mut z = vec![0.0; dim];
        for (i, item) in items.iter().enumerate() {
            let hv = &self.nodes[item.0].value;
            assert_eq!(hv.len(), dim, "weighted_sum: item length mismatch");
            let w = wv[i];
            for (zj, hj) in z.iter_mut().zip(hv) {
                *zj += w * hj;
            }
        }
        self.push(z, Op::WeightedSum { weights, items: items.to_vec() })
    }

    /// y = sum_k coeff_k * v_k with fixed scalar coefficients.
    pub fn lincomb(&mut self, terms: &[(f64, Var)]) -> Var {
        assert!(!terms.is_empty(), "lincomb: empty");
        let dim = self.nodes[terms[0].1 .0].value.len();
        let mut y = vec![0.0; dim];
        for &(c, v) in terms {
            let vv = &self.nodes[v.0].value;
            assert_eq!(vv.len(), dim, "lincomb: length mismatch");
            for (yj, xj) in y.iter_mut().zip(vv) {
                *yj += c * xj;
            }
        }
        self.push(y, Op::LinComb { terms: terms.to_vec() })
    }

    /// Coordinatewise maximum over items; ties go to the earliest item.
    pub fn max_pool(&mut self, items: &[Var]) -> Var {
        assert!(!items.is_empty(), "max_pool: empty");
        let dim = self.nodes[items[0].0].value.len();
        let mut y = self.nodes[items[0].0].value.clone();
        let mut winners = vec![0usize; dim];
        for (i, item) in items.iter().enumerate().skip(1) {
            let hv = &self.nodes[item.0].value;
            assert_eq!(hv.len(), dim, "max_pool: item length mismatch");
            for j in 0..dim {
                if hv[j] > y[j] {
                    y[j] = hv[j];
                    winners[j] = i;
                }
            }
        }
        self.push(y, Op::MaxPool { items: items.to_vec(), winners })
    }

    /// Scalar loss -sum_i target_i ln(softmax(logits)_i), probabilities
    /// clamped at [`PROB_CLAMP`]. Backward is the fused p - target.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: &[f64]) -> Var {
        let lv = &self.nodes[logits.0].value;
        assert_eq!(lv.len(), target.len(), "softmax_cross_entropy: length mismatch");
        let probs = softmax_slice(lv);
        let loss: f64 = probs
            .iter()
            .zip(target)
            .map(|(&p, &t)| -t * p.clamp(PROB_CLAMP, 1.0).ln())
            .sum();
        self.push(
            vec![loss],
            Op::SoftmaxXent { logits, target: target.to_vec(), probs },
        )
    }

    /// Shannon entropy -sum p ln p of a probability vector, in nats,
    /// with the same clamp as every other log in the kernel.
    pub fn entropy(&mut self, probs: Var) -> Var {
        let pv = &self.nodes[probs.0].value;
        let h: f64 = pv.iter().map(|&p| -p * p.clamp(PROB_CLAMP, 1.0).ln()).sum();
        self.push(vec![h], Op::Entropy { probs })
    }

    /// Reverse pass from a scalar loss; accumulates into the `grad`
    /// buffers of every parameter leaf's store entry. Call
    /// `store.zero_grad()` first unless accumulation across graphs is
    /// intended.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        let mut grads: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
        grads[loss.0][0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            let gy = std::mem::take(&mut grads[i]);
            if gy.iter().all(|&g| g == 0.0) {
                grads[i] = gy;
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf { .. } => {}
                Op::Affine { w, b, x, rows, cols } => {
                    let (rows, cols) = (*rows, *cols);
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    for r in 0..rows {
                        let g = gy[r];
                        grads[b.0][r] += g;
                        for c in 0..cols {
                            grads[w.0][r * cols + c] += g * xv[c];
                            grads[x.0][c] += g * wv[r * cols + c];
                        }
                    }
                }
                Op::MatVec { m, x, rows, cols } => {
                    let (rows, cols) = (*rows, *cols);
                    let xv = &self.nodes[x.0].value;
                    let mv = &self.nodes[m.0].value;
                    for r in 0..rows {
                        let g = gy[r];
                        for c in 0..cols {
                            grads[m.0][r * cols + c] += g * xv[c];
                            grads[x.0][c] += g * mv[r * cols + c];
                        }
                    }
                }
                Op::Relu { x } => {
                    for (j, &g) in gy.iter().enumerate() {
                        if self.nodes[x.0].value[j] > 0.0 {
                            grads[x.0][j] += g;
                        }
                    }
                }
                Op::Tanh { x } => {
                    for (j, &g) in gy.iter().enumerate() {
                        let y = self.nodes[i].value[j];
                        grads[x.0][j] += g * (1.0 - y * y);
                    }
                }
                Op::Sigmoid { x } => {
                    for (j, &g) in gy.iter().enumerate() {
                        let y = self.nodes[i].value[j];
                        grads[x.0][j] += g * y * (1.0 - y);
                    }
                }
                Op::MulElem { a, b } => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    for (j, &g) in gy.iter().enumerate() {
                        grads[a.0][j] += g * bv[j];
                        grads[b.0][j] += g * av[j];
                    }
                }
                Op::Dot { a, b } => {
                    let g = gy[0];
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    for j in 0..av.len() {
                        grads[a.0][j] += g * bv[j];
                        grads[b.0][j] += g * av[j];
                    }
                }
                Op::Stack { parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.nodes[p.0].value.len();
                        for j in 0..len {
                            grads[p.0][j] += gy[offset + j];
                        }
                        offset += len;
                    }
                }
                // Both softmax variants share the Jacobian
                // diag(y) - y yT: boosts are additive constants in
                // logit space.
                Op::Softmax { x } | Op::BoostedSoftmax { x } => {
                    let y = &self.nodes[i].value;
                    let s: f64 = gy.iter().zip(y).map(|(g, w)| g * w).sum();
                    for (j, &g) in gy.iter().enumerate() {
                        grads[x.0][j] += y[j] * (g - s);
                    }
                }
                Op::WeightedSum { weights, items } => {
                    for (k, item) in items.iter().enumerate() {
                        let w = self.nodes[weights.0].value[k];
                        let hv = &self.nodes[item.0].value;
                        let mut dw = 0.0;
                        for (j, &g) in gy.iter().enumerate() {
                            dw += g * hv[j];
                            grads[item.0][j] += w * g;
                        }
                        grads[weights.0][k] += dw;
                    }
                }
                Op::LinComb { terms } => {
                    for &(c, v) in terms {
                        for (j, &g) in gy.iter().enumerate() {
                            grads[v.0][j] += c * g;
                        }
                    }
                }
                Op::MaxPool { items, winners } => {
                    for (j, &g) in gy.iter().enumerate() {
                        grads[items[winners[j]].0][j] += g;
                    }
                }
                Op::SoftmaxXent { logits, target, probs } => {
                    let g = gy[0];
                    for j in 0..probs.len() {
                        grads[logits.0][j] += g * (probs[j] - target[j]);
                    }
                }
                Op::Entropy { probs } => {
                    let g = gy[0];
                    for (j, &p) in self.nodes[probs.0].value.iter().enumerate() {
                        // Derivative of the clamped -p ln(max(p, c)).
                        let d = if p >= PROB_CLAMP { -(p.ln() + 1.0) } else { -PROB_CLAMP.ln() };
                        grads[probs.0][j] += g * d;
                    }
                }
            }
            grads[i] = gy;
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(key) } = node.op {
                for (acc, g) in store.grad_mut(key).iter_mut().zip(&grads[i]) {
                    *acc += g;
                }
            }
        }
    }
}
