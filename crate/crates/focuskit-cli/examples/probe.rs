use focuskit::datamodel::{load_cohort, QualityLabel, Split};
use focuskit::stages::{arch_with_aggregator, infer_stage, train_quality, StageKind, TrainConfig};

fn main() {
    let cohort = load_cohort(std::path::Path::new("/tmp/full/cohort/manifest.json")).unwrap();
    let arch = arch_with_aggregator(
        StageKind::Quality,
        cohort.feature_dim,
        42,
        focuskit::aggregate::AggregatorKind::UAAC,
    );
    for (epochs, wd) in [(30usize, 0.0f64), (60, 0.0), (60, 0.01), (100, 0.0), (100, 0.01), (100, 0.1)] {
        let config = TrainConfig {
            epochs,
            batch_size: 8,
            lr: 3e-3,
            seed: focuskit::rng::derive_seed(42, 1),
            loss_mix: 1.0,
            weight_decay: wd,
            select_best: false,
        };
        let start = std::time::Instant::now();
        let trained = train_quality(&cohort, &arch, &config).unwrap();
        let model = &trained.model;
        let thr = model.slice_decision_threshold;
        let mut leaked = 0usize;
        let mut noise = 0usize;
        let mut rej_lesion = 0usize;
        let mut lesions = 0usize;
        let mut rej_bg = 0usize;
        let mut bg = 0usize;
        for bag in cohort.split(Split::Test) {
            let features: Vec<Vec<f64>> = bag.slices.iter().map(|s| s.values.clone()).collect();
            let pred = infer_stage(model, &features).unwrap();
            for i in 0..features.len() {
                let kept = pred.slice_posteriors[i][1] < thr;
                if bag.slice_quality[i] == QualityLabel::Ungradable {
                    noise += 1;
                    if kept {
                        leaked += 1;
                    }
                } else if bag.slice_abnormal[i] {
                    lesions += 1;
                    if !kept {
                        rej_lesion += 1;
                    }
                } else {
                    bg += 1;
                    if !kept {
                        rej_bg += 1;
                    }
                }
            }
        }
        println!(
            "ep {epochs:3} wd {wd:4}: thr {thr:.4} leaks {leaked:2}/{noise} rej_lesion {rej_lesion}/{lesions} rej_bg {rej_bg}/{bg}  ({:.1}s)",
            start.elapsed().as_secs_f64()
        );
    }
}
