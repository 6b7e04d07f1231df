//! Scoring a batch of pipeline reports against cohort truth.
//!
//! Policy for stop verdicts: an Ungradable report is excluded from
//! abnormality and disease metrics and counted in the gradability block.
//! A routed report's predicted disease class is Normal for a Normal
//! verdict and the named disease otherwise, so the disease summary is a
//! 9-class task including Normal.
//!
//! One-vs-rest AUC needs a full posterior per patient, which reports
//! stopped at the Normal gate do not carry; the disease AUC fields are
//! populated only when every scored report has one.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datamodel::{CohortManifest, DiseaseLabel, N_DISEASE_CLASSES};
use crate::error::{FocusError, Result};
use crate::evalkit::bootstrap::{bootstrap_ci, BootstrapCi};
use crate::evalkit::metrics::{confusion_and_f1, one_vs_rest_auc, roc_auc, ConfusionSummary};
use crate::pipeline::{PipelineReport, PipelineStatus};
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupBy {
    All,
    Center,
}

/// Classification scores for one set of (truth, verdict) pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n: usize,
    pub classes: Vec<String>,
    pub confusion: ConfusionSummary,
    /// One-vs-rest AUC per class; None entries are classes absent from
    /// truth. The whole field is None when posteriors are unavailable.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_class_auc: Option<Vec<Option<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_auc: Option<f64>,
    /// Percentile bootstrap CI for macro-F1; absent below 10 patients.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_f1_ci: Option<BootstrapCi>,
}

/// Routing counts over every report, including the excluded ones.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GradabilityBlock {
    pub n_reports: usize,
    pub n_ungradable: usize,
    pub n_normal: usize,
    pub n_diseased: usize,
}

/// Binary patient-level triage scores from the abnormal probabilities.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AbnormalityBlock {
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc_ci: Option<BootstrapCi>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunEvaluation {
    pub group_by: GroupBy,
    pub gradability: GradabilityBlock,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub abnormality: Option<AbnormalityBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disease: Option<EvalSummary>,
    /// Per-center disease summaries; populated under GroupBy::Center.
    pub by_center: BTreeMap<String, EvalSummary>,
}

#[derive(Clone, Copy)]
struct Scored<'a> {
    truth: usize,
    pred: usize,
    center: &'a str,
    abnormal_probability: f64,
    posterior: Option<&'a [f64]>,
}

/// Score pipeline reports against the manifest's labels. Every report
/// must match a manifest entry by patient id; `seed` pins the bootstrap
/// resamples and `resamples` sets their count.
pub fn evaluate_run(
    reports: &[PipelineReport],
    manifest: &CohortManifest,
    group_by: GroupBy,
    seed: u64,
    resamples: usize,
) -> Result<RunEvaluation> {
    let truth_by_id: BTreeMap<&str, (&DiseaseLabel, &str)> = manifest
        .volumes
        .iter()
        .map(|v| (v.patient_id.as_str(), (&v.patient_disease, v.center_id.as_str())))
        .collect();

    let mut gradability =
        GradabilityBlock { n_reports: reports.len(), n_ungradable: 0, n_normal: 0, n_diseased: 0 };
    let mut scored: Vec<Scored> = Vec::new();
    for report in reports {
        let (disease, center) = truth_by_id.get(report.patient_id.as_str()).ok_or_else(|| {
            FocusError::Eval(format!("report {} matches no manifest entry", report.patient_id))
        })?;
        let pred = match report.status {
            PipelineStatus::Ungradable => {
                gradability.n_ungradable += 1;
                continue;
            }
            PipelineStatus::Normal => {
                gradability.n_normal += 1;
                0
            }
            PipelineStatus::Diseased => {
                gradability.n_diseased += 1;
                report
                    .disease
                    .ok_or_else(|| {
                        FocusError::Eval(format!(
                            "diseased report {} names no disease",
                            report.patient_id
                        ))
                    })?
                    .index()
            }
        };
        let abnormal_probability = report.abnormal_probability.ok_or_else(|| {
            FocusError::Eval(format!(
                "routed report {} has no abnormal probability",
                report.patient_id
            ))
        })?;
        scored.push(Scored {
            truth: disease.index(),
            pred,
            center,
            abnormal_probability,
            posterior: report.disease_posterior.as_deref(),
        });
    }

    let abnormality = if scored.is_empty() {
        None
    } else {
        Some(abnormality_block(&scored, seed, resamples)?)
    };
    let disease = if scored.is_empty() {
        None
    } else {
        Some(disease_summary(&scored, derive_seed(seed, 1), resamples)?)
    };
    let mut by_center = BTreeMap::new();
    if group_by == GroupBy::Center {
        let mut groups: BTreeMap<&str, Vec<Scored>> = BTreeMap::new();
        for s in &scored {
            groups.entry(s.center).or_default().push(*s);
        }
        for (i, (center, group)) in groups.into_iter().enumerate() {
            let sub = disease_summary(&group, derive_seed(seed, 100 + i as u64), resamples)?;
            by_center.insert(center.to_string(), sub);
        }
    }

    Ok(RunEvaluation { group_by, gradability, abnormality, disease, by_center })
}

fn abnormality_block(scored: &[Scored], seed: u64, resamples: usize) -> Result<AbnormalityBlock> {
    let labels: Vec<bool> = scored.iter().map(|s| s.truth != 0).collect();
    let probs: Vec<f64> = scored.iter().map(|s| s.abnormal_probability).collect();
    let auc = roc_auc(&labels, &probs).ok();
    let auc_ci = if auc.is_some() && scored.len() >= 10 {
        Some(bootstrap_ci(scored.len(), resamples, seed, |idx| {
            let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
            let p: Vec<f64> = idx.iter().map(|&i| probs[i]).collect();
            roc_auc(&l, &p).ok()
        })?)
    } else {
        None
    };
    Ok(AbnormalityBlock { n: scored.len(), auc, auc_ci })
}

fn disease_summary(scored: &[Scored], seed: u64, resamples: usize) -> Result<EvalSummary> {
    let truth: Vec<usize> = scored.iter().map(|s| s.truth).collect();
    let pred: Vec<usize> = scored.iter().map(|s| s.pred).collect();
    let confusion = confusion_and_f1(&truth, &pred, N_DISEASE_CLASSES)?;

    let (per_class_auc, macro_auc) = if scored.iter().all(|s| s.posterior.is_some()) {
        let rows: Vec<Vec<f64>> = scored.iter().map(|s| s.posterior.unwrap().to_vec()).collect();
        let (per_class, macro_auc) = one_vs_rest_auc(&truth, &rows, N_DISEASE_CLASSES)?;
        (Some(per_class), macro_auc)
    } else {
        (None, None)
    };

    let macro_f1_ci = if scored.len() >= 10 {
        Some(bootstrap_ci(scored.len(), resamples, seed, |idx| {
            let t: Vec<usize> = idx.iter().map(|&i| truth[i]).collect();
            let p: Vec<usize> = idx.iter().map(|&i| pred[i]).collect();
            confusion_and_f1(&t, &p, N_DISEASE_CLASSES).ok().map(|c| c.macro_f1)
        })?)
    } else {
        None
    };

    Ok(EvalSummary {
        n: scored.len(),
        classes: DiseaseLabel::ALL.iter().map(|d| d.name().to_string()).collect(),
        confusion,
        per_class_auc,
        macro_auc,
        macro_f1_ci,
    })
}
