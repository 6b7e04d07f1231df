use super::summary::{evaluate_run, GroupBy};
use crate::aggregate::AggregatorKind;
use crate::datamodel::{
    CohortManifest, DiseaseLabel, QualityLabel, SliceFeature, Split, VolumeBag, VolumeEntry,
};
use crate::evalkit::ablation::{ablation_aggregators, ablation_csv};
use crate::pipeline::{
    ModelVersions, PipelineReport, PipelineStatus, StageTimings, REPORT_SCHEMA_VERSION,
};
use crate::rng::rng_from_seed;
use crate::stages::TrainConfig;
use rand::Rng;
use rand_distr::StandardNormal;

fn entry(id: &str, center: &str, disease: DiseaseLabel) -> VolumeEntry {
    VolumeEntry {
        patient_id: id.into(),
        center_id: center.into(),
        tensor_path: format!("tensors/{id}.f32"),
        split: Split::Test,
        patient_disease: disease,
        slice_quality: vec![QualityLabel::Gradable; 4],
        slice_abnormal: vec![disease != DiseaseLabel::Normal; 4],
    }
}

fn manifest(entries: Vec<VolumeEntry>) -> CohortManifest {
    CohortManifest { schema_version: 1, feature_dim: 8, volumes: entries }
}

fn report(id: &str, status: PipelineStatus, abnormal_p: Option<f64>, disease: Option<DiseaseLabel>) -> PipelineReport {
    PipelineReport {
        schema_version: REPORT_SCHEMA_VERSION,
        patient_id: id.into(),
        status,
        gradable_fraction: 1.0,
        reason: None,
        abnormal_probability: abnormal_p,
        disease,
        disease_posterior: disease.map(|d| {
            let mut p = vec![0.01; 9];
            p[d.index()] = 0.92;
            p
        }),
        evidence: Vec::new(),
        model_versions: ModelVersions {
            quality: "q".into(),
            abnormal: "a".into(),
            disease: "d".into(),
        },
        timings: StageTimings::default(),
    }
}

#[test]
fn ungradable_reports_are_excluded_and_counted() {
    let manifest = manifest(vec![
        entry("p0", "c0", DiseaseLabel::Normal),
        entry("p1", "c0", DiseaseLabel::AMD),
        entry("p2", "c0", DiseaseLabel::Normal),
        entry("p3", "c0", DiseaseLabel::CNV),
    ]);
    let reports = vec![
        report("p0", PipelineStatus::Ungradable, None, None),
        report("p1", PipelineStatus::Diseased, Some(0.9), Some(DiseaseLabel::AMD)),
        report("p2", PipelineStatus::Normal, Some(0.1), None),
        report("p3", PipelineStatus::Diseased, Some(0.8), Some(DiseaseLabel::CNV)),
    ];
    let eval = evaluate_run(&reports, &manifest, GroupBy::All, 5, 400).unwrap();
    assert_eq!(eval.gradability.n_reports, 4);
    assert_eq!(eval.gradability.n_ungradable, 1);
    assert_eq!(eval.gradability.n_normal, 1);
    assert_eq!(eval.gradability.n_diseased, 2);

    let disease = eval.disease.unwrap();
    assert_eq!(disease.n, 3);
    let total: usize = disease.confusion.matrix.iter().flatten().sum();
    assert_eq!(total, 3);
    assert_eq!(disease.confusion.macro_f1, 1.0);
    assert!(disease.macro_f1_ci.is_none(), "below the 10-patient floor");

    let abnormality = eval.abnormality.unwrap();
    assert_eq!(abnormality.n, 3);
    assert_eq!(abnormality.auc, Some(1.0));
    assert!(eval.by_center.is_empty());
}

#[test]
fn verdict_classes_map_normal_to_class_zero() {
    let manifest = manifest(vec![
        entry("p0", "c0", DiseaseLabel::AMD),
        entry("p1", "c0", DiseaseLabel::Normal),
    ]);
    // A missed AMD patient (stopped Normal) and a false alarm on the
    // Normal patient.
    let reports = vec![
        report("p0", PipelineStatus::Normal, Some(0.2), None),
        report("p1", PipelineStatus::Diseased, Some(0.9), Some(DiseaseLabel::CSC)),
    ];
    let eval = evaluate_run(&reports, &manifest, GroupBy::All, 5, 400).unwrap();
    let disease = eval.disease.unwrap();
    assert_eq!(disease.confusion.matrix[DiseaseLabel::AMD.index()][0], 1);
    assert_eq!(disease.confusion.matrix[0][DiseaseLabel::CSC.index()], 1);
    assert_eq!(disease.confusion.macro_f1, 0.0);
    // Every scored report carried a posterior except the Normal stop.
    assert!(disease.per_class_auc.is_none());
}

#[test]
fn single_center_sub_summary_matches_the_top_summary() {
    let manifest = manifest(vec![
        entry("p0", "c0", DiseaseLabel::Normal),
        entry("p1", "c0", DiseaseLabel::AMD),
        entry("p2", "c0", DiseaseLabel::CNV),
    ]);
    let reports = vec![
        report("p0", PipelineStatus::Normal, Some(0.1), None),
        report("p1", PipelineStatus::Diseased, Some(0.9), Some(DiseaseLabel::AMD)),
        report("p2", PipelineStatus::Diseased, Some(0.7), Some(DiseaseLabel::AMD)),
    ];
    let eval = evaluate_run(&reports, &manifest, GroupBy::Center, 5, 400).unwrap();
    assert_eq!(eval.by_center.len(), 1);
    let all = eval.disease.unwrap();
    let sub = &eval.by_center["c0"];
    assert_eq!(sub.n, all.n);
    assert_eq!(sub.confusion.matrix, all.confusion.matrix);
    assert_eq!(sub.confusion.macro_f1, all.confusion.macro_f1);
}

#[test]
fn center_confusion_matrices_sum_to_the_all_matrix() {
    let manifest = manifest(vec![
        entry("p0", "c0", DiseaseLabel::Normal),
        entry("p1", "c0", DiseaseLabel::AMD),
        entry("p2", "c1", DiseaseLabel::CNV),
        entry("p3", "c1", DiseaseLabel::Normal),
    ]);
    let reports = vec![
        report("p0", PipelineStatus::Normal, Some(0.2), None),
        report("p1", PipelineStatus::Diseased, Some(0.8), Some(DiseaseLabel::AMD)),
        report("p2", PipelineStatus::Diseased, Some(0.9), Some(DiseaseLabel::MH)),
        report("p3", PipelineStatus::Diseased, Some(0.6), Some(DiseaseLabel::DR)),
    ];
    let eval = evaluate_run(&reports, &manifest, GroupBy::Center, 5, 400).unwrap();
    let all = eval.disease.unwrap().confusion.matrix;
    let mut summed = vec![vec![0usize; 9]; 9];
    for sub in eval.by_center.values() {
        for (i, row) in sub.confusion.matrix.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                summed[i][j] += v;
            }
        }
    }
    assert_eq!(summed, all);
}

#[test]
fn unmatched_patient_id_is_an_error() {
    let manifest = manifest(vec![entry("p0", "c0", DiseaseLabel::Normal)]);
    let reports = vec![report("ghost", PipelineStatus::Normal, Some(0.1), None)];
    assert!(evaluate_run(&reports, &manifest, GroupBy::All, 5, 400).is_err());
}

#[test]
fn full_posteriors_enable_multiclass_auc() {
    let entries: Vec<VolumeEntry> = (0..12)
        .map(|i| {
            let d = if i % 2 == 0 { DiseaseLabel::AMD } else { DiseaseLabel::CNV };
            entry(&format!("p{i:02}"), "c0", d)
        })
        .collect();
    let manifest = manifest(entries);
    let reports: Vec<PipelineReport> = (0..12)
        .map(|i| {
            let d = if i % 2 == 0 { DiseaseLabel::AMD } else { DiseaseLabel::CNV };
            report(&format!("p{i:02}"), PipelineStatus::Diseased, Some(0.9), Some(d))
        })
        .collect();
    let eval = evaluate_run(&reports, &manifest, GroupBy::All, 5, 400).unwrap();
    let disease = eval.disease.unwrap();
    let per_class = disease.per_class_auc.unwrap();
    assert_eq!(per_class[DiseaseLabel::AMD.index()], Some(1.0));
    assert_eq!(per_class[DiseaseLabel::CNV.index()], Some(1.0));
    assert_eq!(per_class[0], None, "Normal absent from truth");
    assert_eq!(disease.macro_auc, Some(1.0));
    let ci = disease.macro_f1_ci.unwrap();
    assert!(ci.lower <= ci.point && ci.point <= ci.upper);
}

/// In-memory cohort for the ablation: every abnormal slice is shifted
/// along axis 1, lesions on every slice (pure bags), no noise slices.
fn pure_bag_cohort(n_patients: usize, d: usize, delta: f64, seed: u64) -> crate::datamodel::Cohort {
    let mut rng = rng_from_seed(seed);
    let mut bags = Vec::new();
    for p in 0..n_patients {
        let abnormal = p % 2 == 1;
        let disease = if abnormal { DiseaseLabel::AMD } else { DiseaseLabel::Normal };
        let split = match p % 5 {
            0 | 1 | 2 => Split::Train,
            3 => Split::Val,
            _ => Split::Test,
        };
        let n_slices = 6;
        let mut slices = Vec::new();
        for _ in 0..n_slices {
            let mut x: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            if abnormal {
                x[1] += delta;
            }
            slices.push(SliceFeature::new(x).unwrap());
        }
        bags.push(
            VolumeBag::new(
                format!("p{p:03}"),
                "c0".into(),
                split,
                slices,
                vec![QualityLabel::Gradable; n_slices],
                vec![abnormal; n_slices],
                disease,
            )
            .unwrap(),
        );
    }
    crate::datamodel::Cohort { feature_dim: d, bags }
}

#[test]
fn ablation_rows_are_deterministic_and_near_perfect_on_pure_bags() {
    let cohort = pure_bag_cohort(30, 8, 3.0, 41);
    let kinds = [AggregatorKind::Max, AggregatorKind::Attention];
    let config = TrainConfig { epochs: 5, batch_size: 4, lr: 3e-3, seed: 13, loss_mix: 0.5, ..TrainConfig::default() };
    let rows = ablation_aggregators(&cohort, &kinds, &config).unwrap();
    assert_eq!(rows.len(), 2);
    for row in &rows {
        assert!(row.patient_auc.is_finite() && row.macro_f1.is_finite());
    }
    // Pure bags are an easy regime: max pooling and attention agree.
    assert!((rows[0].patient_auc - rows[1].patient_auc).abs() <= 0.02);

    let again = ablation_aggregators(&cohort, &kinds, &config).unwrap();
    assert_eq!(ablation_csv(&rows), ablation_csv(&again));

    let csv = ablation_csv(&rows);
    let lines: Vec<&str> = csv.trim_end().lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "kind,patient_auc,macro_f1");
    assert!(lines[1].starts_with("Max,"));
    assert!(lines[2].starts_with("Attention,"));
}
