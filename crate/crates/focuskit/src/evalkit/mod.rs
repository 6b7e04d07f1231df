//! Metrics and the experiment harness: ROC/confusion summaries,
//! bootstrap confidence intervals, per-center breakdowns, and the
//! aggregator ablation.

pub mod ablation;
pub mod bootstrap;
pub mod metrics;
pub mod summary;

pub use ablation::{ablation_aggregators, ablation_csv, AblationRow};
pub use bootstrap::{bootstrap_ci, BootstrapCi, DEFAULT_RESAMPLES};
pub use metrics::{confusion_and_f1, one_vs_rest_auc, roc_auc, roc_points, ConfusionSummary};
pub use summary::{evaluate_run, EvalSummary, GroupBy, RunEvaluation};

#[cfg(test)]
mod summary_tests;
