//! Classification metrics: confusion matrices, per-class F1, ROC.
//!
//! All functions are pure. AUC uses the rank statistic with midranks for
//! ties, which equals brute-force pairwise concordance exactly: every
//! intermediate is a multiple of 0.5, representable in f64 far beyond the
//! sample sizes involved.

use crate::error::{FocusError, Result};

/// Precision/recall/F1 of one class, with its truth support.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Confusion matrix (rows = truth, columns = prediction) plus derived
/// per-class and macro scores.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ConfusionSummary {
    pub matrix: Vec<Vec<usize>>,
    pub per_class: Vec<ClassScores>,
    /// Unweighted mean F1 over classes that appear in the truth.
    pub macro_f1: f64,
    pub n: usize,
}

pub fn confusion_and_f1(truth: &[usize], pred: &[usize], k: usize) -> Result<ConfusionSummary> {
    if truth.is_empty() {
        return Err(FocusError::Eval("cannot score an empty prediction set".into()));
    }
    if truth.len() != pred.len() {
        return Err(FocusError::Eval(format!(
            "{} truth labels vs {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    if let Some(&bad) = truth.iter().chain(pred).find(|&&c| c >= k) {
        return Err(FocusError::Eval(format!("class index {bad} out of range for K={k}")));
    }
    let mut matrix = vec![vec![0usize; k]; k];
    for (&t, &p) in truth.iter().zip(pred) {
        matrix[t][p] += 1;
    }
    let mut per_class = Vec::with_capacity(k);
    let mut f1_sum = 0.0;
    let mut f1_classes = 0usize;
    for c in 0..k {
        let tp = matrix[c][c];
        let fp: usize = (0..k).filter(|&t| t != c).map(|t| matrix[t][c]).sum();
        let fn_: usize = (0..k).filter(|&p| p != c).map(|p| matrix[c][p]).sum();
        let support = tp + fn_;
        let precision = safe_ratio(tp, tp + fp);
        let recall = safe_ratio(tp, support);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        if support > 0 {
            f1_sum += f1;
            f1_classes += 1;
        }
        per_class.push(ClassScores { precision, recall, f1, support });
    }
    Ok(ConfusionSummary {
        matrix,
        per_class,
        macro_f1: f1_sum / f1_classes as f64,
        n: truth.len(),
    })
}

fn safe_ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Area under the ROC curve via the midrank statistic. Equal to the
/// probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn roc_auc(truth: &[bool], scores: &[f64]) -> Result<f64> {
    if truth.len() != scores.len() {
        return Err(FocusError::Eval(format!(
            "{} labels vs {} scores",
            truth.len(),
            scores.len()
        )));
    }
    let n_pos = truth.iter().filter(|&&t| t).count();
    let n_neg = truth.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(FocusError::Eval(
            "AUC is undefined when only one class is present".into(),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(FocusError::Eval("AUC scores must be finite".into()));
    }
    let mut order: Vec<usize> = (0..truth.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
    // Midranks: tied scores share the average of their 1-based ranks.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if truth[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// ROC curve points as (fpr, tpr), from (0,0) to (1,1), one step per
/// distinct score threshold swept from high to low.
pub fn roc_points(truth: &[bool], scores: &[f64]) -> Result<Vec<(f64, f64)>> {
    let n_pos = truth.iter().filter(|&&t| t).count();
    let n_neg = truth.len() - n_pos;
    if n_pos == 0 || n_neg == 0 || truth.len() != scores.len() {
        return Err(FocusError::Eval("ROC curve needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..truth.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if truth[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    Ok(points)
}

/// One-vs-rest AUC per class from score rows; None for classes missing
/// from the truth. The macro average is the mean over defined entries.
pub fn one_vs_rest_auc(
    truth: &[usize],
    scores: &[Vec<f64>],
    k: usize,
) -> Result<(Vec<Option<f64>>, Option<f64>)> {
    if truth.len() != scores.len() {
        return Err(FocusError::Eval("one label row per score row required".into()));
    }
    if scores.iter().any(|row| row.len() != k) {
        return Err(FocusError::Eval(format!("score rows must have {k} entries")));
    }
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let labels: Vec<bool> = truth.iter().map(|&t| t == c).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            per_class.push(None);
            continue;
        }
        let class_scores: Vec<f64> = scores.iter().map(|row| row[c]).collect();
        per_class.push(Some(roc_auc(&labels, &class_scores)?));
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let macro_auc = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    Ok((per_class, macro_auc))
}
