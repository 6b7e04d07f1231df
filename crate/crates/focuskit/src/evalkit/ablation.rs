//! Head-to-head comparison of pooling kinds on one cohort.
//!
//! Every kind trains the same abnormality architecture from the same
//! seed, so encoder and head initializations are identical and the only
//! degree of freedom is the pooling mechanism. Scoring uses the test
//! split on ground-truth-gradable slices, which keeps the quality stage
//! out of the comparison.

use serde::{Deserialize, Serialize};

use crate::aggregate::AggregatorKind;
use crate::datamodel::{Cohort, QualityLabel, Split};
use crate::error::{FocusError, Result};
use crate::evalkit::metrics::{confusion_and_f1, roc_auc};
use crate::stages::{
    arch_with_aggregator, infer_stage, train_patient_stage, StageKind, TrainConfig,
};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AblationRow {
    pub kind: AggregatorKind,
    pub patient_auc: f64,
    pub macro_f1: f64,
}

/// Train one abnormality model per pooling kind and score each on the
/// test split. Deterministic given (cohort, kinds, config).
pub fn ablation_aggregators(
    cohort: &Cohort,
    kinds: &[AggregatorKind],
    config: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    if kinds.is_empty() {
        return Err(FocusError::Eval("no pooling kinds to compare".into()));
    }
    let mut rows = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let arch = arch_with_aggregator(StageKind::Abnormality, cohort.feature_dim, config.seed, kind);
        let trained = train_patient_stage(cohort, StageKind::Abnormality, &arch, config, None)?;

        let mut labels = Vec::new();
        let mut scores = Vec::new();
        let mut truth = Vec::new();
        let mut pred = Vec::new();
        for bag in cohort.split(Split::Test) {
            let features: Vec<Vec<f64>> = bag
                .slices
                .iter()
                .zip(&bag.slice_quality)
                .filter(|(_, q)| matches!(q, QualityLabel::Gradable))
                .map(|(s, _)| s.values.clone())
                .collect();
            if features.is_empty() {
                continue;
            }
            let posterior =
                infer_stage(&trained.model, &features)?.patient_posterior.ok_or_else(|| {
                    FocusError::Eval("abnormality stage produced no patient posterior".into())
                })?;
            labels.push(bag.is_abnormal());
            scores.push(posterior[1]);
            truth.push(bag.is_abnormal() as usize);
            pred.push((posterior[1] >= 0.5) as usize);
        }
        let patient_auc = roc_auc(&labels, &scores)?;
        let macro_f1 = confusion_and_f1(&truth, &pred, 2)?.macro_f1;
        rows.push(AblationRow { kind, patient_auc, macro_f1 });
    }
    Ok(rows)
}

/// The table as CSV with a header row, six decimal places.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("kind,patient_auc,macro_f1\n");
    for row in rows {
        out.push_str(&format!(
            "{:?},{:.6},{:.6}\n",
            row.kind, row.patient_auc, row.macro_f1
        ));
    }
    out
}
