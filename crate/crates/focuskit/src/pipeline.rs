//! End-to-end orchestration: quality gate, abnormality triage, disease
//! call, structured report.
//!
//! Routing is a strict forward chain with two stop states. Stage 1
//! scores per-slice gradability; a volume whose gradable fraction falls
//! below the gate threshold stops as Ungradable and never reaches a
//! classifier. Stage 2 scores patient abnormality; below the abnormal
//! threshold the volume stops as Normal. Stage 3 names a disease by
//! argmax over the eight disease classes, with Normal excluded because
//! stage 2 owns that decision, and reports the top pooling weights as
//! slice evidence.
//!
//! A report never carries fields from a stage that did not run: that
//! invariant is enforced here by construction, not by callers.
//!
//! [`run`] is pure given immutable models; [`run_batch`] fans patients
//! out over threads and keeps per-patient failures isolated, with all
//! outputs ordered by patient id.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datamodel::{load_manifest, load_volume, manifest_dir, DiseaseLabel, Split};
use crate::error::{FocusError, Result};
use crate::stages::checkpoint::{load_stage, param_bytes, sha256_hex};
use crate::stages::{infer_stage, StageKind, StageModel, StagePrediction};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Minimum fraction of gradable slices for a volume to proceed.
    pub gradable_fraction_threshold: f64,
    /// Minimum P(abnormal) for a volume to reach the disease stage.
    pub abnormal_threshold: f64,
    /// Evidence entries reported for a Diseased verdict.
    pub evidence_top_k: usize,
    /// Hide slices the quality stage flagged from later stages.
    pub drop_ungradable_slices: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            gradable_fraction_threshold: 0.5,
            abnormal_threshold: 0.5,
            evidence_top_k: 5,
            drop_ungradable_slices: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gradable_fraction_threshold > 0.0 && self.gradable_fraction_threshold <= 1.0) {
            return Err(FocusError::Spec(
                "gradable_fraction_threshold must lie in (0, 1]".into(),
            ));
        }
        if !(self.abnormal_threshold > 0.0 && self.abnormal_threshold < 1.0) {
            return Err(FocusError::Spec("abnormal_threshold must lie in (0, 1)".into()));
        }
        if self.evidence_top_k == 0 {
            return Err(FocusError::Spec("evidence_top_k must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PipelineStatus {
    Ungradable,
    Normal,
    Diseased,
}

/// One slice's contribution to a Diseased verdict: its index in the
/// original volume, its pooling weight among the surviving slices, and
/// its certainty.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvidenceEntry {
    pub slice_index: usize,
    pub weight: f64,
    pub certainty: f64,
}

/// Checksums of the three stage checkpoints a verdict came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelVersions {
    pub quality: String,
    pub abnormal: String,
    pub disease: String,
}

/// Wall-clock milliseconds per executed stage; stages that never ran
/// stay absent.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub quality_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub abnormal_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disease_ms: Option<f64>,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// The structured verdict for one volume. Optional fields are present
/// exactly when their stage ran: Ungradable reports carry no
/// classification fields and Normal reports no disease fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineReport {
    pub schema_version: u32,
    pub patient_id: String,
    pub status: PipelineStatus,
    pub gradable_fraction: f64,
    /// Human-readable cause for a stop verdict.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub abnormal_probability: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disease: Option<DiseaseLabel>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disease_posterior: Option<Vec<f64>>,
    /// Top pooling weights from the disease stage, weight-descending,
    /// indices into the original volume. Empty unless Diseased.
    pub evidence: Vec<EvidenceEntry>,
    pub model_versions: ModelVersions,
    pub timings: StageTimings,
}

/// What the pipeline needs from a model bundle. Implemented by
/// [`TrainedModels`]; tests substitute scripted implementations.
pub trait DiagnosticModels {
    /// Per-slice [P(gradable), P(ungradable)] rows.
    fn quality_slice_posteriors(&self, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>>;
    fn abnormality(&self, features: &[Vec<f64>]) -> Result<StagePrediction>;
    fn disease(&self, features: &[Vec<f64>]) -> Result<StagePrediction>;
    fn versions(&self) -> ModelVersions;
    /// P(ungradable) at or above this marks a slice ungradable.
    fn quality_slice_threshold(&self) -> f64 {
        0.5
    }
}

/// The three trained stage models, dimension-checked against each other.
pub struct TrainedModels {
    pub quality: StageModel,
    pub abnormal: StageModel,
    pub disease: StageModel,
    versions: ModelVersions,
}

impl TrainedModels {
    pub fn new(quality: StageModel, abnormal: StageModel, disease: StageModel) -> Result<Self> {
        for (model, kind) in [
            (&quality, StageKind::Quality),
            (&abnormal, StageKind::Abnormality),
            (&disease, StageKind::Disease),
        ] {
            if model.stage != kind {
                return Err(FocusError::Checkpoint(format!(
                    "expected a {kind:?} model, got {:?}",
                    model.stage
                )));
            }
        }
        if quality.feature_dim != abnormal.feature_dim || abnormal.feature_dim != disease.feature_dim
        {
            return Err(FocusError::Checkpoint(format!(
                "stage feature dims disagree: quality {}, abnormal {}, disease {}",
                quality.feature_dim, abnormal.feature_dim, disease.feature_dim
            )));
        }
        let versions = ModelVersions {
            quality: sha256_hex(&param_bytes(&quality)?),
            abnormal: sha256_hex(&param_bytes(&abnormal)?),
            disease: sha256_hex(&param_bytes(&disease)?),
        };
        Ok(Self { quality, abnormal, disease, versions })
    }

    /// Load all three stage checkpoints from one directory.
    pub fn load(dir: &Path) -> Result<Self> {
        Self::new(
            load_stage(dir, StageKind::Quality)?,
            load_stage(dir, StageKind::Abnormality)?,
            load_stage(dir, StageKind::Disease)?,
        )
    }

    pub fn feature_dim(&self) -> usize {
        self.quality.feature_dim
    }
}

impl DiagnosticModels for TrainedModels {
    fn quality_slice_posteriors(&self, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        Ok(infer_stage(&self.quality, features)?.slice_posteriors)
    }

    fn abnormality(&self, features: &[Vec<f64>]) -> Result<StagePrediction> {
        infer_stage(&self.abnormal, features)
    }

    fn disease(&self, features: &[Vec<f64>]) -> Result<StagePrediction> {
        infer_stage(&self.disease, features)
    }

    fn versions(&self) -> ModelVersions {
        self.versions.clone()
    }

    fn quality_slice_threshold(&self) -> f64 {
        self.quality.slice_decision_threshold
    }
}

fn ms_since(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Run the three-stage chain on one volume's slice features.
pub fn run<M: DiagnosticModels>(
    patient_id: &str,
    features: &[Vec<f64>],
    models: &M,
    config: &PipelineConfig,
) -> Result<PipelineReport> {
    config.validate()?;
    if features.is_empty() {
        return Err(FocusError::Validation(format!("volume {patient_id} has no slices")));
    }
    let n = features.len();

    let t0 = Instant::now();
    let quality = models.quality_slice_posteriors(features)?;
    if quality.len() != n {
        return Err(FocusError::Validation(format!(
            "quality stage returned {} rows for {n} slices",
            quality.len()
        )));
    }
    let threshold = models.quality_slice_threshold();
    let gradable: Vec<usize> =
        (0..n).filter(|&i| quality[i][1] < threshold).collect();
    let gradable_fraction = gradable.len() as f64 / n as f64;
    let mut timings = StageTimings { quality_ms: ms_since(t0), ..Default::default() };

    let mut report = PipelineReport {
        schema_version: REPORT_SCHEMA_VERSION,
        patient_id: patient_id.to_string(),
        status: PipelineStatus::Ungradable,
        gradable_fraction,
        reason: None,
        abnormal_probability: None,
        disease: None,
        disease_posterior: None,
        evidence: Vec::new(),
        model_versions: models.versions(),
        timings,
    };

    if gradable.is_empty() {
        report.reason = Some("no gradable slices".into());
        return Ok(report);
    }
    if gradable_fraction < config.gradable_fraction_threshold {
        report.reason = Some(format!(
            "gradable fraction {gradable_fraction:.4} below threshold {:.4}",
            config.gradable_fraction_threshold
        ));
        return Ok(report);
    }

    // Later stages see either the surviving slices or the whole volume;
    // `kept` maps their positions back to original slice indices.
    let kept: Vec<usize> =
        if config.drop_ungradable_slices { gradable } else { (0..n).collect() };
    let surviving: Vec<Vec<f64>> = kept.iter().map(|&i| features[i].clone()).collect();

    let t1 = Instant::now();
    let triage = models.abnormality(&surviving)?;
    timings.abnormal_ms = Some(ms_since(t1));
    let abnormal_probability = triage
        .patient_posterior
        .as_ref()
        .ok_or_else(|| {
            FocusError::Validation("abnormality stage produced no patient posterior".into())
        })?[1];
    report.abnormal_probability = Some(abnormal_probability);

    if abnormal_probability < config.abnormal_threshold {
        report.status = PipelineStatus::Normal;
        report.reason = Some(format!(
            "abnormal probability {abnormal_probability:.4} below threshold {:.4}",
            config.abnormal_threshold
        ));
        report.timings = timings;
        return Ok(report);
    }

    let t2 = Instant::now();
    let call = models.disease(&surviving)?;
    timings.disease_ms = Some(ms_since(t2));
    let posterior = call.patient_posterior.clone().ok_or_else(|| {
        FocusError::Validation("disease stage produced no patient posterior".into())
    })?;
    if posterior.len() != crate::datamodel::N_DISEASE_CLASSES {
        return Err(FocusError::Validation(format!(
            "disease posterior has {} entries",
            posterior.len()
        )));
    }
    // Normal (index 0) is excluded: stage 2 already ruled it out. The
    // strict > keeps the lowest index on ties.
    let mut best = 1;
    for k in 2..posterior.len() {
        if posterior[k] > posterior[best] {
            best = k;
        }
    }
    report.status = PipelineStatus::Diseased;
    report.disease = Some(DiseaseLabel::from_index(best)?);
    report.disease_posterior = Some(posterior);
    report.evidence = top_evidence(&call, &kept, config.evidence_top_k);
    report.timings = timings;
    Ok(report)
}

/// Top-k pooling weights mapped back to original slice indices,
/// weight-descending with index ascending as the tie-break.
fn top_evidence(call: &StagePrediction, kept: &[usize], k: usize) -> Vec<EvidenceEntry> {
    let agg = match &call.aggregation {
        Some(agg) => agg,
        None => return Vec::new(),
    };
    let mut entries: Vec<EvidenceEntry> = agg
        .weights
        .iter()
        .zip(&agg.certainties)
        .enumerate()
        .map(|(pos, (&weight, &certainty))| EvidenceEntry {
            slice_index: kept[pos],
            weight,
            certainty,
        })
        .collect();
    entries.sort_by(|a, b| {
        b.weight
            .partial_cmp(&a.weight)
            .unwrap()
            .then(a.slice_index.cmp(&b.slice_index))
    });
    entries.truncate(k);
    entries
}

/// One recorded per-patient failure inside a batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchFailure {
    pub patient_id: String,
    pub error: String,
}

/// Batch rollup: status counts, failures, and mean per-stage latency
/// over the reports that ran each stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchSummary {
    pub schema_version: u32,
    pub n_patients: usize,
    pub status_counts: BTreeMap<String, usize>,
    pub failures: Vec<BatchFailure>,
    pub mean_quality_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_abnormal_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_disease_ms: Option<f64>,
}

pub struct BatchRun {
    pub reports: Vec<PipelineReport>,
    pub summary: BatchSummary,
}

/// Run manifest volumes (all of them, or one [`Split`]) and write one
/// report JSON per patient into `out_dir/reports/` plus
/// `out_dir/summary.json`, returning both.
/// Per-patient failures are recorded in the summary, never fatal.
/// Output ordering is by patient id regardless of thread count.
pub fn run_batch<M: DiagnosticModels + Sync>(
    manifest_path: &Path,
    models: &M,
    config: &PipelineConfig,
    split: Option<Split>,
    out_dir: &Path,
    threads: usize,
) -> Result<BatchRun> {
    config.validate()?;
    if threads == 0 {
        return Err(FocusError::Spec("threads must be positive".into()));
    }
    let manifest = load_manifest(manifest_path)?;
    let volumes: Vec<_> = manifest
        .volumes
        .iter()
        .filter(|entry| split.map_or(true, |s| entry.split == s))
        .collect();
    let base = manifest_dir(manifest_path);
    let report_dir = out_dir.join("reports");
    fs::create_dir_all(&report_dir)?;

    let next = AtomicUsize::new(0);
    let outcomes: Mutex<Vec<(String, std::result::Result<PipelineReport, String>)>> =
        Mutex::new(Vec::with_capacity(volumes.len()));
    std::thread::scope(|scope| {
        for _ in 0..threads.min(volumes.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let entry = match volumes.get(i) {
                    Some(entry) => *entry,
                    None => break,
                };
                let outcome = load_volume(&base, manifest.feature_dim, entry).and_then(|bag| {
                    let rows: Vec<Vec<f64>> =
                        bag.slices.iter().map(|s| s.values.clone()).collect();
                    run(&bag.patient_id, &rows, models, config)
                });
                outcomes
                    .lock()
                    .unwrap()
                    .push((entry.patient_id.clone(), outcome.map_err(|e| e.to_string())));
            });
        }
    });

    let mut outcomes = outcomes.into_inner().unwrap();
    outcomes.sort_by(|a, b| a.0.cmp(&b.0));
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (patient_id, outcome) in outcomes {
        match outcome {
            Ok(report) => reports.push(report),
            Err(error) => failures.push(BatchFailure { patient_id, error }),
        }
    }

    let mut status_counts = BTreeMap::new();
    for status in ["Ungradable", "Normal", "Diseased"] {
        status_counts.insert(status.to_string(), 0);
    }
    for report in &reports {
        let key = match report.status {
            PipelineStatus::Ungradable => "Ungradable",
            PipelineStatus::Normal => "Normal",
            PipelineStatus::Diseased => "Diseased",
        };
        *status_counts.get_mut(key).unwrap() += 1;
    }
    let mean = |values: Vec<f64>| {
        if values.is_empty() { None } else { Some(values.iter().sum::<f64>() / values.len() as f64) }
    };
    let summary = BatchSummary {
        schema_version: REPORT_SCHEMA_VERSION,
        n_patients: volumes.len(),
        status_counts,
        failures,
        mean_quality_ms: mean(reports.iter().map(|r| r.timings.quality_ms).collect())
            .unwrap_or(0.0),
        mean_abnormal_ms: mean(
            reports.iter().filter_map(|r| r.timings.abnormal_ms).collect(),
        ),
        mean_disease_ms: mean(reports.iter().filter_map(|r| r.timings.disease_ms).collect()),
    };

    for report in &reports {
        let path = report_dir.join(format!("{}.json", report.patient_id));
        fs::write(&path, format!("{}\n", serde_json::to_string_pretty(report)?))?;
    }
    fs::write(
        out_dir.join("summary.json"),
        format!("{}\n", serde_json::to_string_pretty(&summary)?),
    )?;
    Ok(BatchRun { reports, summary })
}
