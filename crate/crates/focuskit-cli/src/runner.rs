//! One function per subcommand. Each takes a resolved [`RunConfig`]
//! plus paths, does the work, prints a short summary to stdout, and
//! leaves its artifacts under the output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use focuskit::aggregate::AggregatorKind;
use focuskit::datamodel::{load_cohort, Cohort, QualityLabel, Split, VolumeBag};
use focuskit::evalkit::{
    ablation_aggregators, ablation_csv, confusion_and_f1, evaluate_run, roc_auc, EvalSummary,
    RunEvaluation,
};
use focuskit::pipeline::{run_batch, PipelineReport, PipelineStatus, TrainedModels};
use focuskit::stages::checkpoint::{load_stage, save_stage};
use focuskit::stages::{
    infer_stage, train_patient_stage, train_quality, StageKind, StageModel, TrainedStage,
};
use focuskit::synthgen::gen_cohort;
use focuskit::{FocusError, Result};

use crate::config::RunConfig;

/// Which stages a `train` invocation covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSel {
    Quality,
    Abnormal,
    Disease,
    All,
}

impl StageSel {
    fn includes(self, stage: StageKind) -> bool {
        match self {
            StageSel::All => true,
            StageSel::Quality => stage == StageKind::Quality,
            StageSel::Abnormal => stage == StageKind::Abnormality,
            StageSel::Disease => stage == StageKind::Disease,
        }
    }
}

/// Record of what produced a directory's artifacts. `config_sha256`
/// hashes the effective config serialization, so two runs with the same
/// hash ran under identical settings.
pub fn write_provenance(config: &RunConfig, command: &str, out_dir: &Path) -> Result<()> {
    let effective = serde_json::to_value(config)?;
    let canonical = serde_json::to_string(&effective)?;
    let record = serde_json::json!({
        "schema_version": 1,
        "command": command,
        "tool_version": env!("CARGO_PKG_VERSION"),
        "seed": config.seed,
        "config_sha256": hex_digest(canonical.as_bytes()),
        "effective_config": effective,
    });
    fs::create_dir_all(out_dir)?;
    fs::write(
        out_dir.join("provenance.json"),
        format!("{}\n", serde_json::to_string_pretty(&record)?),
    )?;
    Ok(())
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let mut out = String::with_capacity(64);
    for byte in hasher.finalize() {
        write!(out, "{byte:02x}").unwrap();
    }
    out
}

/// Generate the configured cohort under `out_dir`.
pub fn run_generate(config: &RunConfig, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let generated = gen_cohort(&config.synth, out_dir)?;
    write_provenance(config, "generate", out_dir)?;
    for warning in &generated.split_warnings {
        eprintln!("warning: {warning}");
    }
    println!(
        "generated {} volumes ({} slices x {} dims) -> {}",
        generated.manifest.volumes.len(),
        config.synth.slices_per_volume,
        config.synth.feature_dim,
        generated.manifest_path.display()
    );
    Ok(())
}

fn check_feature_dim(config: &RunConfig, cohort: &Cohort) -> Result<()> {
    if cohort.feature_dim != config.synth.feature_dim {
        return Err(FocusError::Spec(format!(
            "manifest feature_dim {} does not match config feature_dim {}",
            cohort.feature_dim, config.synth.feature_dim
        )));
    }
    Ok(())
}

/// Train the selected stages and write checkpoints, loss curves, and
/// provenance into `model_dir`. With encoder sharing on, the disease
/// stage warm-starts from the abnormality encoder trained in the same
/// call or, for a single-stage call, loaded from `model_dir`.
pub fn run_train(
    config: &RunConfig,
    manifest_path: &Path,
    stage_sel: StageSel,
    model_dir: &Path,
) -> Result<()> {
    let cohort = load_cohort(manifest_path)?;
    check_feature_dim(config, &cohort)?;
    fs::create_dir_all(model_dir)?;

    if stage_sel.includes(StageKind::Quality) {
        let trained = train_quality(
            &cohort,
            &config.arch_for(StageKind::Quality),
            &config.train.quality,
        )?;
        finish_stage(&trained, StageKind::Quality, &cohort, model_dir)?;
    }

    let mut abnormal_model: Option<StageModel> = None;
    if stage_sel.includes(StageKind::Abnormality) {
        let trained = train_patient_stage(
            &cohort,
            StageKind::Abnormality,
            &config.arch_for(StageKind::Abnormality),
            &config.train.abnormal,
            None,
        )?;
        finish_stage(&trained, StageKind::Abnormality, &cohort, model_dir)?;
        abnormal_model = Some(trained.model);
    }

    if stage_sel.includes(StageKind::Disease) {
        let loaded;
        let encoder_init = if config.train.share_encoder {
            Some(match &abnormal_model {
                Some(model) => model,
                None => {
                    loaded = load_stage(model_dir, StageKind::Abnormality)?;
                    &loaded
                }
            })
        } else {
            None
        };
        let trained = train_patient_stage(
            &cohort,
            StageKind::Disease,
            &config.arch_for(StageKind::Disease),
            &config.train.disease,
            encoder_init,
        )?;
        finish_stage(&trained, StageKind::Disease, &cohort, model_dir)?;
    }

    write_provenance(config, "train", model_dir)?;
    Ok(())
}

/// Save one trained stage, write its loss curve, and print its final
/// validation metric.
fn finish_stage(
    trained: &TrainedStage,
    kind: StageKind,
    cohort: &Cohort,
    model_dir: &Path,
) -> Result<()> {
    save_stage(&trained.model, model_dir)?;
    let mut csv = String::from("epoch,train,val\n");
    for (epoch, loss) in trained.history.iter().enumerate() {
        writeln!(csv, "{},{:.6},{:.6}", epoch + 1, loss.train, loss.val).unwrap();
    }
    let stem = kind.file_stem();
    fs::write(model_dir.join(format!("{stem}_loss.csv")), csv)?;

    let val = cohort.split(Split::Val);
    let line = match kind {
        StageKind::Quality => {
            format!("val slice AUC {:.4}", quality_slice_auc(&trained.model, &val)?)
        }
        StageKind::Abnormality => {
            format!("val patient AUC {:.4}", abnormality_patient_auc(&trained.model, &val)?)
        }
        StageKind::Disease => {
            format!("val macro-F1 {:.4}", disease_macro_f1(&trained.model, &val)?)
        }
    };
    let skipped = if trained.skipped_bags > 0 {
        format!(", {} bags skipped", trained.skipped_bags)
    } else {
        String::new()
    };
    println!("{stem}: {} epochs, {line}{skipped} -> {stem}.ckpt", trained.history.len());
    Ok(())
}

fn quality_slice_auc(model: &StageModel, bags: &[&VolumeBag]) -> Result<f64> {
    let mut labels = Vec::new();
    let mut scores = Vec::new();
    for bag in bags {
        let features: Vec<Vec<f64>> = bag.slices.iter().map(|s| s.values.clone()).collect();
        let pred = infer_stage(model, &features)?;
        for (posterior, quality) in pred.slice_posteriors.iter().zip(&bag.slice_quality) {
            labels.push(matches!(quality, QualityLabel::Ungradable));
            scores.push(posterior[1]);
        }
    }
    roc_auc(&labels, &scores)
}

/// Gradable slices of each bag, or None when it has none. Patient-level
/// validation mirrors training, which never sees ungradable slices.
fn gradable_features(bag: &VolumeBag) -> Option<Vec<Vec<f64>>> {
    let features: Vec<Vec<f64>> = bag
        .slices
        .iter()
        .zip(&bag.slice_quality)
        .filter(|(_, q)| matches!(q, QualityLabel::Gradable))
        .map(|(s, _)| s.values.clone())
        .collect();
    if features.is_empty() {
        None
    } else {
        Some(features)
    }
}

fn abnormality_patient_auc(model: &StageModel, bags: &[&VolumeBag]) -> Result<f64> {
    let mut labels = Vec::new();
    let mut scores = Vec::new();
    for bag in bags {
        let Some(features) = gradable_features(bag) else { continue };
        let posterior = infer_stage(model, &features)?
            .patient_posterior
            .ok_or_else(|| FocusError::Eval("abnormality stage gave no patient posterior".into()))?;
        labels.push(bag.is_abnormal());
        scores.push(posterior[1]);
    }
    roc_auc(&labels, &scores)
}

fn disease_macro_f1(model: &StageModel, bags: &[&VolumeBag]) -> Result<f64> {
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    for bag in bags {
        let Some(features) = gradable_features(bag) else { continue };
        let posterior = infer_stage(model, &features)?
            .patient_posterior
            .ok_or_else(|| FocusError::Eval("disease stage gave no patient posterior".into()))?;
        truth.push(bag.patient_disease.index());
        pred.push(argmax(&posterior));
    }
    Ok(confusion_and_f1(&truth, &pred, focuskit::datamodel::N_DISEASE_CLASSES)?.macro_f1)
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Run the pipeline over manifest volumes (optionally one split) using
/// checkpoints from `model_dir`; write reports, a batch summary, a
/// per-patient CSV, and provenance into `out_dir`.
pub fn run_infer(
    config: &RunConfig,
    manifest_path: &Path,
    model_dir: &Path,
    split: Option<Split>,
    out_dir: &Path,
    threads: usize,
) -> Result<()> {
    let models = TrainedModels::load(model_dir)?;
    let batch = run_batch(manifest_path, &models, &config.pipeline, split, out_dir, threads)?;
    fs::write(out_dir.join("patients.csv"), patients_csv(&batch.reports))?;
    write_provenance(config, "infer", out_dir)?;
    let counts = &batch.summary.status_counts;
    println!(
        "{} patients: {} ungradable, {} normal, {} diseased, {} failed -> {}",
        batch.summary.n_patients,
        counts["Ungradable"],
        counts["Normal"],
        counts["Diseased"],
        batch.summary.failures.len(),
        out_dir.join("reports").display()
    );
    Ok(())
}

fn patients_csv(reports: &[PipelineReport]) -> String {
    let mut csv = String::from("patient_id,status,abnormal_probability,disease,confidence\n");
    for report in reports {
        let status = match report.status {
            PipelineStatus::Ungradable => "Ungradable",
            PipelineStatus::Normal => "Normal",
            PipelineStatus::Diseased => "Diseased",
        };
        let abnormal = report
            .abnormal_probability
            .map(|p| format!("{p:.6}"))
            .unwrap_or_default();
        let disease = report.disease.map(|d| d.name().to_string()).unwrap_or_default();
        let confidence = report
            .disease_posterior
            .as_ref()
            .zip(report.disease.map(|d| d.index()))
            .map(|(posterior, idx)| format!("{:.6}", posterior[idx]))
            .unwrap_or_default();
        writeln!(csv, "{},{status},{abnormal},{disease},{confidence}", report.patient_id)
            .unwrap();
    }
    csv
}

/// Score the reports in `reports_dir` against the manifest labels;
/// write `eval.json` and a confusion CSV into `out_dir` and print the
/// headline metrics.
pub fn run_eval(
    config: &RunConfig,
    manifest_path: &Path,
    reports_dir: &Path,
    out_dir: &Path,
) -> Result<()> {
    let reports = read_reports(reports_dir)?;
    let manifest = focuskit::datamodel::load_manifest(manifest_path)?;
    let evaluation = evaluate_run(
        &reports,
        &manifest,
        config.eval.group_by,
        config.seed,
        config.eval.resamples,
    )?;
    fs::create_dir_all(out_dir)?;
    fs::write(
        out_dir.join("eval.json"),
        format!("{}\n", serde_json::to_string_pretty(&evaluation)?),
    )?;
    if let Some(disease) = &evaluation.disease {
        fs::write(out_dir.join("confusion.csv"), confusion_csv(disease))?;
    }
    write_provenance(config, "eval", out_dir)?;
    print_evaluation(&evaluation);
    Ok(())
}

fn read_reports(reports_dir: &Path) -> Result<Vec<PipelineReport>> {
    let mut paths = Vec::new();
    for entry in fs::read_dir(reports_dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "json") {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(FocusError::Eval(format!(
            "no report JSON files in {}",
            reports_dir.display()
        )));
    }
    let mut reports = Vec::with_capacity(paths.len());
    for path in paths {
        let report: PipelineReport = serde_json::from_str(&fs::read_to_string(&path)?)
            .map_err(|e| FocusError::Format(format!("{}: {e}", path.display())))?;
        reports.push(report);
    }
    Ok(reports)
}

fn confusion_csv(summary: &EvalSummary) -> String {
    let mut csv = String::from("truth\\pred");
    for class in &summary.classes {
        write!(csv, ",{class}").unwrap();
    }
    csv.push('\n');
    for (class, row) in summary.classes.iter().zip(&summary.confusion.matrix) {
        write!(csv, "{class}").unwrap();
        for count in row {
            write!(csv, ",{count}").unwrap();
        }
        csv.push('\n');
    }
    csv
}

fn print_evaluation(evaluation: &RunEvaluation) {
    let g = &evaluation.gradability;
    println!(
        "{} reports: {} ungradable, {} normal, {} diseased",
        g.n_reports, g.n_ungradable, g.n_normal, g.n_diseased
    );
    if let Some(abnormality) = &evaluation.abnormality {
        match abnormality.auc {
            Some(auc) => println!("abnormality: AUC {auc:.4} over {} patients", abnormality.n),
            None => println!("abnormality: AUC undefined over {} patients", abnormality.n),
        }
    }
    if let Some(disease) = &evaluation.disease {
        print_disease_line("disease", disease);
    }
    for (center, summary) in &evaluation.by_center {
        print_disease_line(&format!("disease[{center}]"), summary);
    }
}

fn print_disease_line(label: &str, summary: &EvalSummary) {
    let mut line = format!("{label}: macro-F1 {:.4}", summary.confusion.macro_f1);
    if let Some(ci) = &summary.macro_f1_ci {
        write!(line, " (95% CI {:.4}..{:.4})", ci.lower, ci.upper).unwrap();
    }
    if let Some(auc) = summary.macro_auc {
        write!(line, ", macro-AUC {auc:.4}").unwrap();
    }
    println!("{line} over {} patients", summary.n);
}

/// Train one abnormality model per pooling kind on the manifest cohort
/// and write the comparison table to `out_path`.
pub fn run_ablate(
    config: &RunConfig,
    manifest_path: &Path,
    kinds: &[AggregatorKind],
    out_path: &Path,
) -> Result<()> {
    let cohort = load_cohort(manifest_path)?;
    check_feature_dim(config, &cohort)?;
    let rows = ablation_aggregators(&cohort, kinds, &config.train.abnormal)?;
    let csv = ablation_csv(&rows);
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(out_path, &csv)?;
    print!("{csv}");
    Ok(())
}
