//! The three trainable stage models and their training loops.
//!
//! Every stage is an encoder MLP plus a linear slice head. The two
//! patient-level stages (abnormality, disease) add a pooler and a
//! patient head and train with a joint loss,
//!
//!   loss = mix * mean(slice CE) + (1 - mix) * patient CE
//!
//! where the slice posteriors also feed the UAAC certainty boosts as
//! constants. The quality stage is slice-level only; turning slice
//! verdicts into a volume gate is pipeline policy.
//!
//! Patient-level stages train on ground-truth-gradable slices, matching
//! the deployed flow where the quality gate drops ungradable slices
//! before anything downstream sees them. Bags with no gradable slice are
//! skipped and counted.
//!
//! Training owns its model exclusively; a trained model is immutable and
//! [`infer_stage`] is safe to call concurrently.

pub mod checkpoint;

use serde::{Deserialize, Serialize};

use crate::aggregate::{Aggregator, AggregatorKind, AggregatorSpec};
use crate::datamodel::{Cohort, VolumeBag, N_DISEASE_CLASSES};
use crate::diffkernel::tape::softmax_slice;
use crate::diffkernel::{
    Activation, Adam, AdamConfig, Mlp, MlpSpec, OutputActivation, ParamStore, Tape, Var,
};
use crate::error::{FocusError, Result};
use crate::rng::{derive_seed, rng_from_seed};
use rand::Rng;

/// Which stage a model implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageKind {
    Quality,
    Abnormality,
    Disease,
}

impl StageKind {
    /// Basename used for checkpoint files.
    pub fn file_stem(self) -> &'static str {
        match self {
            StageKind::Quality => "quality",
            StageKind::Abnormality => "abnormal",
            StageKind::Disease => "disease",
        }
    }

    pub fn n_classes(self) -> usize {
        match self {
            StageKind::Quality | StageKind::Abnormality => 2,
            StageKind::Disease => N_DISEASE_CLASSES,
        }
    }

    pub fn is_patient_level(self) -> bool {
        self != StageKind::Quality
    }
}

/// Patient head shape: one shared linear layer over the fused embedding,
/// or (for ClassQuery pooling) one scoring row per class embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PatientHeadSpec {
    Single(MlpSpec),
    PerClass(Vec<MlpSpec>),
}

/// Complete architecture of one stage model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageArch {
    pub encoder: MlpSpec,
    pub slice_head: MlpSpec,
    pub aggregator: Option<AggregatorSpec>,
    pub patient_head: Option<PatientHeadSpec>,
}

impl StageArch {
    /// Check that the dimensions chain encoder -> heads -> pooler and
    /// that the stage has exactly the parts it needs.
    pub fn validate(&self, stage: StageKind, feature_dim: usize) -> Result<()> {
        self.encoder.validate()?;
        self.slice_head.validate()?;
        let k = stage.n_classes();
        if self.encoder.input_dim() != feature_dim {
            return Err(FocusError::Spec(format!(
                "encoder expects {} inputs but cohort features have {feature_dim}",
                self.encoder.input_dim()
            )));
        }
        let embed = self.encoder.output_dim();
        if self.slice_head.input_dim() != embed || self.slice_head.output_dim() != k {
            return Err(FocusError::Spec(format!(
                "slice head must map {embed} -> {k}, got {:?}",
                self.slice_head.widths
            )));
        }
        match (stage.is_patient_level(), &self.aggregator, &self.patient_head) {
            (false, None, None) => Ok(()),
            (false, _, _) => Err(FocusError::Spec(
                "quality stage takes no aggregator or patient head".into(),
            )),
            (true, Some(agg), Some(head)) => {
                agg.validate()?;
                if agg.n_classes != k {
                    return Err(FocusError::Spec(format!(
                        "aggregator n_classes {} does not match stage classes {k}",
                        agg.n_classes
                    )));
                }
                match head {
                    PatientHeadSpec::Single(spec) => {
                        spec.validate()?;
                        if spec.input_dim() != embed || spec.output_dim() != k {
                            return Err(FocusError::Spec(format!(
                                "patient head must map {embed} -> {k}, got {:?}",
                                spec.widths
                            )));
                        }
                        if agg.kind == AggregatorKind::ClassQuery {
                            return Err(FocusError::Spec(
                                "ClassQuery pooling needs a per-class patient head".into(),
                            ));
                        }
                    }
                    PatientHeadSpec::PerClass(rows) => {
                        if agg.kind != AggregatorKind::ClassQuery {
                            return Err(FocusError::Spec(
                                "per-class patient head requires ClassQuery pooling".into(),
                            ));
                        }
                        if rows.len() != k {
                            return Err(FocusError::Spec(format!(
                                "per-class head has {} rows for {k} classes",
                                rows.len()
                            )));
                        }
                        for row in rows {
                            row.validate()?;
                            if row.input_dim() != embed || row.output_dim() != 1 {
                                return Err(FocusError::Spec(format!(
                                    "per-class head rows must map {embed} -> 1, got {:?}",
                                    row.widths
                                )));
                            }
                        }
                    }
                }
                Ok(())
            }
            (true, _, _) => Err(FocusError::Spec(
                "patient-level stage needs an aggregator and a patient head".into(),
            )),
        }
    }
}

/// Default architecture for a stage: small ReLU encoder, linear heads,
/// UAAC pooling for the patient-level stages.
pub fn default_arch(stage: StageKind, feature_dim: usize, seed: u64) -> StageArch {
    arch_with_aggregator(stage, feature_dim, seed, AggregatorKind::UAAC)
}

/// Default architecture with the pooling kind swapped, for ablations.
pub fn arch_with_aggregator(
    stage: StageKind,
    feature_dim: usize,
    seed: u64,
    kind: AggregatorKind,
) -> StageArch {
    let k = stage.n_classes();
    let mlp = |widths: &[usize], stream: u64| MlpSpec {
        widths: widths.to_vec(),
        activation: Activation::ReLU,
        output_activation: OutputActivation::None,
        init_seed: derive_seed(seed, stream),
    };
    if !stage.is_patient_level() {
        // The gate must keep lesion slices while rejecting noise, and both
        // stand out from background; the same wide detector bank the
        // patient stages use makes that boundary directional instead of
        // norm-based.
        return StageArch {
            encoder: mlp(&[feature_dim, 256, 64], 1),
            slice_head: mlp(&[64, k], 2),
            aggregator: None,
            patient_head: None,
        };
    }
    let embed = 64;
    let mut agg = AggregatorSpec::new(kind, k);
    agg.hidden_dim = 64;
    let patient_head = if kind == AggregatorKind::ClassQuery {
        PatientHeadSpec::PerClass((0..k).map(|i| mlp(&[embed, 1], 16 + i as u64)).collect())
    } else {
        PatientHeadSpec::Single(mlp(&[embed, k], 3))
    };
    StageArch {
        // A wide first layer gives the encoder many candidate directional
        // detectors, which the lesion geometry rewards.
        encoder: mlp(&[feature_dim, 256, embed], 1),
        slice_head: mlp(&[embed, k], 2),
        aggregator: Some(agg),
        patient_head: Some(patient_head),
    }
}

#[derive(Debug)]
enum PatientHead {
    Single(Mlp),
    PerClass(Vec<Mlp>),
}

/// One stage's trained (or trainable) model: architecture plus the
/// parameter store holding every weight.
#[derive(Debug)]
pub struct StageModel {
    pub stage: StageKind,
    pub feature_dim: usize,
    pub arch: StageArch,
    pub store: ParamStore,
    /// Slice-level positive threshold used by the pipeline when it
    /// binarizes this stage's slice posteriors.
    pub slice_decision_threshold: f64,
    encoder: Mlp,
    slice_head: Mlp,
    aggregator: Option<Aggregator>,
    patient_head: Option<PatientHead>,
}

// Seed stream for aggregator parameter init, derived from the encoder's
// init seed so one arch value pins every draw.
const STREAM_AGG_INIT: u64 = 0xA6;

impl StageModel {
    /// Build a freshly initialized model. Registration order is fixed
    /// (encoder, slice head, aggregator, patient head), which is what
    /// the checkpoint layout relies on.
    pub fn build(stage: StageKind, feature_dim: usize, arch: &StageArch) -> Result<Self> {
        arch.validate(stage, feature_dim)?;
        let mut store = ParamStore::new();
        let encoder = Mlp::register(&mut store, "encoder", &arch.encoder)?;
        let slice_head = Mlp::register(&mut store, "slice_head", &arch.slice_head)?;
        let embed = arch.encoder.output_dim();
        let aggregator = match &arch.aggregator {
            Some(spec) => {
                let mut rng = rng_from_seed(derive_seed(arch.encoder.init_seed, STREAM_AGG_INIT));
                Some(Aggregator::register(&mut store, "agg", spec, embed, &mut rng)?)
            }
            None => None,
        };
        let patient_head = match &arch.patient_head {
            Some(PatientHeadSpec::Single(spec)) => {
                Some(PatientHead::Single(Mlp::register(&mut store, "patient_head", spec)?))
            }
            Some(PatientHeadSpec::PerClass(rows)) => {
                let mlps = rows
                    .iter()
                    .enumerate()
                    .map(|(i, spec)| Mlp::register(&mut store, &format!("patient_head.row{i}"), spec))
                    .collect::<Result<Vec<_>>>()?;
                Some(PatientHead::PerClass(mlps))
            }
            None => None,
        };
        Ok(Self {
            stage,
            feature_dim,
            arch: arch.clone(),
            store,
            slice_decision_threshold: 0.5,
            encoder,
            slice_head,
            aggregator,
            patient_head,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.stage.n_classes()
    }

    /// Copy encoder weights from another model (same encoder widths).
    pub fn warm_start_encoder(&mut self, source: &StageModel) -> Result<()> {
        if source.arch.encoder.widths != self.arch.encoder.widths {
            return Err(FocusError::Training(format!(
                "encoder widths differ: {:?} vs {:?}",
                source.arch.encoder.widths, self.arch.encoder.widths
            )));
        }
        for i in 0..self.store.len() {
            let name = self.store.get(i).name.clone();
            if !name.starts_with("encoder.") {
                continue;
            }
            let src = source
                .store
                .index_of(&name)
                .ok_or_else(|| FocusError::Training(format!("source model lacks param {name}")))?;
            let values = source.store.get(src).values.clone();
            *self.store.values_mut(i) = values;
        }
        Ok(())
    }

    /// Per-slice class posterior from the current weights (plain math,
    /// no tape; this is the stop-gradient path).
    pub fn slice_posterior(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        let h = self.encoder.infer(store, x)?;
        Ok(softmax_slice(&self.slice_head.infer(store, &h)?))
    }

    /// UAAC boost vector (c_i + floor) for a bag, or None when the
    /// pooler takes no certainties. Computed outside any tape.
    pub fn compute_boosts(&self, store: &ParamStore, features: &[Vec<f64>]) -> Result<Option<Vec<f64>>> {
        let agg = match &self.aggregator {
            Some(agg) => agg,
            None => return Ok(None),
        };
        let spec = agg.spec();
        if spec.kind != AggregatorKind::UAAC || !spec.uncertainty_enabled {
            return Ok(None);
        }
        let mut boosts = Vec::with_capacity(features.len());
        for x in features {
            let p = self.slice_posterior(store, x)?;
            if p.iter().any(|v| !v.is_finite()) {
                return Err(FocusError::Training(
                    "non-finite slice posterior while computing certainty boosts".into(),
                ));
            }
            boosts.push(crate::aggregate::certainty(&p, spec.n_classes)? + spec.certainty_floor);
        }
        Ok(Some(boosts))
    }

    /// Build the joint loss graph for one bag. `boosts` must come from
    /// [`Self::compute_boosts`]; passing a frozen copy makes the graph
    /// finite-difference-checkable despite the certainty stop-gradient.
    pub fn patient_bag_graph(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: &[Vec<f64>],
        slice_targets: &[usize],
        patient_target: usize,
        loss_mix: f64,
        boosts: Option<&[f64]>,
    ) -> Result<Var> {
        let agg = self
            .aggregator
            .as_ref()
            .ok_or_else(|| FocusError::Training("stage has no aggregator".into()))?;
        let head = self.patient_head.as_ref().unwrap();
        let k = self.n_classes();
        let enc = self.encoder.bind(tape, store);
        let shead = self.slice_head.bind(tape, store);
        let bound_agg = agg.bind(tape, store);

        let mut h_nodes = Vec::with_capacity(features.len());
        let mut slice_losses = Vec::with_capacity(features.len());
        for (x, &t) in features.iter().zip(slice_targets) {
            let xv = tape.constant(x.clone());
            let h = enc.forward(tape, xv);
            h_nodes.push(h);
            if loss_mix > 0.0 {
                let logits = shead.forward(tape, h);
                slice_losses.push(tape.softmax_cross_entropy(logits, &one_hot(t, k)));
            }
        }

        let pooled = bound_agg.pool_graph(tape, &h_nodes, boosts);
        let patient_logits = match head {
            PatientHead::Single(mlp) => {
                let bound = mlp.bind(tape, store);
                bound.forward(tape, pooled.z)
            }
            PatientHead::PerClass(rows) => {
                let class_embeddings = pooled
                    .class_embeddings
                    .as_ref()
                    .expect("ClassQuery pooling yields class embeddings");
                let logit_nodes: Vec<Var> = rows
                    .iter()
                    .zip(class_embeddings)
                    .map(|(row, &zk)| {
                        let bound = row.bind(tape, store);
                        bound.forward(tape, zk)
                    })
                    .collect();
                tape.stack(&logit_nodes)
            }
        };

        let mut terms: Vec<(f64, Var)> = Vec::new();
        if loss_mix > 0.0 {
            let scale = loss_mix / slice_losses.len() as f64;
            terms.extend(slice_losses.iter().map(|&l| (scale, l)));
        }
        if loss_mix < 1.0 {
            let patient_loss =
                tape.softmax_cross_entropy(patient_logits, &one_hot(patient_target, k));
            terms.push((1.0 - loss_mix, patient_loss));
        }
        Ok(tape.lincomb(&terms))
    }

    /// Mean slice cross-entropy graph for one bag (the quality loss).
    pub fn quality_bag_graph(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: &[Vec<f64>],
        slice_targets: &[usize],
    ) -> Result<Var> {
        let k = self.n_classes();
        let enc = self.encoder.bind(tape, store);
        let shead = self.slice_head.bind(tape, store);
        let mut losses = Vec::with_capacity(features.len());
        for (x, &t) in features.iter().zip(slice_targets) {
            let xv = tape.constant(x.clone());
            let h = enc.forward(tape, xv);
            let logits = shead.forward(tape, h);
            losses.push(tape.softmax_cross_entropy(logits, &one_hot(t, k)));
        }
        let scale = 1.0 / losses.len() as f64;
        let terms: Vec<(f64, Var)> = losses.iter().map(|&l| (scale, l)).collect();
        Ok(tape.lincomb(&terms))
    }
}

fn one_hot(class: usize, k: usize) -> Vec<f64> {
    let mut t = vec![0.0; k];
    t[class] = 1.0;
    t
}

/// Training hyperparameters. `loss_mix` is the slice-loss weight; the
/// patient loss gets the complement.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub loss_mix: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Keep the epoch whose validation target loss is lowest instead of
    /// the final iterate. The target loss drops the slice term, so
    /// patient stages select on patient cross-entropy and the quality
    /// stage on its slice loss.
    #[serde(default)]
    pub select_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            lr: 3e-3,
            seed: 0,
            loss_mix: 0.5,
            weight_decay: 0.0,
            select_best: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(FocusError::Spec("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(FocusError::Spec("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(FocusError::Spec("lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.loss_mix) {
            return Err(FocusError::Spec("loss_mix must lie in [0, 1]".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(FocusError::Spec("weight_decay must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochLoss {
    pub train: f64,
    pub val: f64,
}

#[derive(Debug)]
pub struct TrainedStage {
    pub model: StageModel,
    pub history: Vec<EpochLoss>,
    /// Training bags dropped because no slice was admitted, or because a
    /// positive patient kept no informative slice.
    pub skipped_bags: usize,
}

/// One bag reduced to what the loss needs.
struct TrainingBag {
    features: Vec<Vec<f64>>,
    slice_targets: Vec<usize>,
    patient_target: usize,
}

fn quality_bag(bag: &VolumeBag) -> TrainingBag {
    TrainingBag {
        features: bag.slices.iter().map(|s| s.values.clone()).collect(),
        slice_targets: bag
            .slice_quality
            .iter()
            .map(|q| matches!(q, crate::datamodel::QualityLabel::Ungradable) as usize)
            .collect(),
        patient_target: 0,
    }
}

/// Admission mask from a trained quality gate, matching the filter the
/// pipeline applies at inference.
fn gate_keep_mask(gate: &StageModel, bag: &VolumeBag) -> Result<Vec<bool>> {
    let features: Vec<Vec<f64>> = bag.slices.iter().map(|s| s.values.clone()).collect();
    let pred = infer_stage(gate, &features)?;
    Ok(pred
        .slice_posteriors
        .iter()
        .map(|p| p[1] < gate.slice_decision_threshold)
        .collect())
}

/// Slices admitted by `keep` only. A slice target is positive only when
/// the lesion content is actually present: an ungradable slice at a
/// lesion position holds pure noise, so it trains as class zero even
/// when a leaky gate admits it. None when nothing is admitted, or when
/// a positive patient has no informative slice left (such a bag carries
/// only label noise).
fn patient_bag(bag: &VolumeBag, task: StageKind, keep: &[bool]) -> Option<TrainingBag> {
    let mut features = Vec::new();
    let mut slice_targets = Vec::new();
    for (i, slice) in bag.slices.iter().enumerate() {
        if !keep[i] {
            continue;
        }
        let informative = matches!(bag.slice_quality[i], crate::datamodel::QualityLabel::Gradable)
            && bag.slice_abnormal[i];
        features.push(slice.values.clone());
        slice_targets.push(match task {
            StageKind::Abnormality => informative as usize,
            StageKind::Disease => {
                if informative {
                    bag.patient_disease.index()
                } else {
                    0
                }
            }
            StageKind::Quality => unreachable!(),
        });
    }
    if features.is_empty() {
        return None;
    }
    let patient_target = match task {
        StageKind::Abnormality => bag.is_abnormal() as usize,
        StageKind::Disease => bag.patient_disease.index(),
        StageKind::Quality => unreachable!(),
    };
    if patient_target != 0 && slice_targets.iter().all(|&t| t == 0) {
        return None;
    }
    Some(TrainingBag { features, slice_targets, patient_target })
}

/// Train the slice-level quality classifier.
pub fn train_quality(cohort: &Cohort, arch: &StageArch, config: &TrainConfig) -> Result<TrainedStage> {
    config.validate()?;
    let mut model = StageModel::build(StageKind::Quality, cohort.feature_dim, arch)?;
    let train: Vec<TrainingBag> = cohort.split(crate::datamodel::Split::Train).iter().map(|b| quality_bag(b)).collect();
    let val: Vec<TrainingBag> = cohort.split(crate::datamodel::Split::Val).iter().map(|b| quality_bag(b)).collect();
    let classes: std::collections::BTreeSet<usize> =
        train.iter().flat_map(|b| b.slice_targets.iter().copied()).collect();
    if classes.len() < 2 {
        return Err(FocusError::Training(
            "quality training data contains a single class; cohort has no ungradable slices"
                .into(),
        ));
    }
    let history = run_training(&mut model, &train, &val, config, |model, tape, store, bag, _mix| {
        model.quality_bag_graph(tape, store, &bag.features, &bag.slice_targets)
    })?;
    model.slice_decision_threshold =
        calibrate_threshold(&model, cohort.split(crate::datamodel::Split::Val))?;
    Ok(TrainedStage { model, history, skipped_bags: 0 })
}

/// Slice strata the gate must trade off: the classifier sees two classes,
/// but downstream stages care whether a kept slice carries a lesion.
#[derive(Clone, Copy, PartialEq, Eq)]
enum GateStratum {
    Background,
    Lesion,
    Noise,
}

/// Decision threshold on the ungradable posterior that maximizes the mean
/// over strata of (kept background, kept lesion, rejected noise) rates on
/// the validation slices. Lesion slices are far rarer than background, so
/// plain accuracy would let the gate discard them freely even though the
/// downstream stages depend on them. Ties resolve toward 0.5.
fn calibrate_threshold(model: &StageModel, val: Vec<&VolumeBag>) -> Result<f64> {
    let mut scored: Vec<(f64, GateStratum)> = Vec::new();
    for bag in val {
        let features: Vec<Vec<f64>> = bag.slices.iter().map(|s| s.values.clone()).collect();
        let pred = infer_stage(model, &features)?;
        for i in 0..features.len() {
            let stratum = match bag.slice_quality[i] {
                crate::datamodel::QualityLabel::Ungradable => GateStratum::Noise,
                crate::datamodel::QualityLabel::Gradable if bag.slice_abnormal[i] => {
                    GateStratum::Lesion
                }
                crate::datamodel::QualityLabel::Gradable => GateStratum::Background,
            };
            scored.push((pred.slice_posteriors[i][1], stratum));
        }
    }
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let count = |s: GateStratum| scored.iter().filter(|(_, t)| *t == s).count();
    let totals = [
        count(GateStratum::Background),
        count(GateStratum::Lesion),
        count(GateStratum::Noise),
    ];
    if totals[2] == 0 || totals[0] + totals[1] == 0 {
        return Ok(0.5);
    }
    let mut best: (f64, f64) = (f64::MIN, 0.5);
    let mut below = [0usize; 3];
    let mut consider = |cut: f64, below: &[usize; 3]| {
        let mut score_sum = 0.0;
        let mut strata = 0.0;
        if totals[0] > 0 {
            score_sum += below[0] as f64 / totals[0] as f64;
            strata += 1.0;
        }
        if totals[1] > 0 {
            score_sum += below[1] as f64 / totals[1] as f64;
            strata += 1.0;
        }
        score_sum += (totals[2] - below[2]) as f64 / totals[2] as f64;
        strata += 1.0;
        let objective = score_sum / strata;
        let better = objective > best.0 + 1e-12
            || (objective > best.0 - 1e-12 && (cut - 0.5).abs() < (best.1 - 0.5).abs());
        if better {
            best = (objective.max(best.0), cut);
        }
    };
    consider(0.5_f64.min(scored[0].0 * 0.5), &below);
    for i in 0..scored.len() {
        below[scored[i].1 as usize] += 1;
        let cut = if i + 1 < scored.len() {
            0.5 * (scored[i].0 + scored[i + 1].0)
        } else {
            0.5 * (scored[i].0 + 1.0)
        };
        consider(cut, &below);
    }
    Ok(best.1)
}

/// Train a patient-level stage (abnormality or disease) with the joint
/// slice+patient loss. `encoder_init` warm-starts the encoder from an
/// already-trained stage. `gate` filters training slices with the
/// trained quality model so the stage sees the same slice distribution
/// the pipeline will feed it, leaked noise included; without a gate the
/// reference quality labels filter instead.
pub fn train_patient_stage(
    cohort: &Cohort,
    task: StageKind,
    arch: &StageArch,
    config: &TrainConfig,
    encoder_init: Option<&StageModel>,
    gate: Option<&StageModel>,
) -> Result<TrainedStage> {
    config.validate()?;
    if !task.is_patient_level() {
        return Err(FocusError::Training("use train_quality for the quality stage".into()));
    }
    if let Some(gate) = gate {
        if gate.stage != StageKind::Quality {
            return Err(FocusError::Training("slice gate must be a quality model".into()));
        }
    }
    let mut model = StageModel::build(task, cohort.feature_dim, arch)?;
    if let Some(source) = encoder_init {
        model.warm_start_encoder(source)?;
    }
    let mut skipped = 0usize;
    let collect = |bags: Vec<&VolumeBag>, skipped: &mut usize| -> Result<Vec<TrainingBag>> {
        let mut out = Vec::new();
        for b in bags {
            let keep = match gate {
                Some(gate) => gate_keep_mask(gate, b)?,
                None => b
                    .slice_quality
                    .iter()
                    .map(|q| matches!(q, crate::datamodel::QualityLabel::Gradable))
                    .collect(),
            };
            match patient_bag(b, task, &keep) {
                Some(prepared) => out.push(prepared),
                None => *skipped += 1,
            }
        }
        Ok(out)
    };
    let train = collect(cohort.split(crate::datamodel::Split::Train), &mut skipped)?;
    let mut val_skipped = 0usize;
    let val = collect(cohort.split(crate::datamodel::Split::Val), &mut val_skipped)?;
    let classes: std::collections::BTreeSet<usize> =
        train.iter().map(|b| b.patient_target).collect();
    if classes.len() < 2 {
        return Err(FocusError::Training(format!(
            "{task:?} training data contains a single patient class"
        )));
    }
    let history = run_training(&mut model, &train, &val, config, |model, tape, store, bag, mix| {
        let boosts = model.compute_boosts(store, &bag.features)?;
        model.patient_bag_graph(
            tape,
            store,
            &bag.features,
            &bag.slice_targets,
            bag.patient_target,
            mix,
            boosts.as_deref(),
        )
    })?;
    Ok(TrainedStage { model, history, skipped_bags: skipped })
}

/// Shared epoch/batch loop: shuffles bags per epoch, averages per-bag
/// losses within each batch, and records train/val loss per epoch. The
/// learning rate follows a cosine decay from `config.lr` toward zero so
/// late epochs settle instead of oscillating.
fn run_training<F>(
    model: &mut StageModel,
    train: &[TrainingBag],
    val: &[TrainingBag],
    config: &TrainConfig,
    build_bag_loss: F,
) -> Result<Vec<EpochLoss>>
where
    F: Fn(&StageModel, &mut Tape, &ParamStore, &TrainingBag, f64) -> Result<Var>,
{
    if train.is_empty() {
        return Err(FocusError::Training("no usable training bags".into()));
    }
    if val.is_empty() {
        return Err(FocusError::Training("no usable validation bags".into()));
    }
    let adam_cfg = AdamConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(adam_cfg, &model.store);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    for epoch in 0..config.epochs {
        let phase = epoch as f64 / config.epochs as f64;
        adam.set_lr(config.lr * 0.5 * (1.0 + (std::f64::consts::PI * phase).cos()));
        let mut rng = rng_from_seed(derive_seed(config.seed, epoch as u64));
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            model.store.zero_grad();
            let mut tape = Tape::new();
            let mut bag_losses = Vec::with_capacity(batch.len());
            for &bi in batch {
                let loss =
                    build_bag_loss(model, &mut tape, &model.store, &train[bi], config.loss_mix)
                        .map_err(|e| position_error(epoch, batch_idx, &e))?;
                bag_losses.push(loss);
            }
            let scale = 1.0 / bag_losses.len() as f64;
            let terms: Vec<(f64, Var)> = bag_losses.iter().map(|&l| (scale, l)).collect();
            let batch_loss = tape.lincomb(&terms);
            let loss_value = tape.value(batch_loss)[0];
            if !loss_value.is_finite() {
                return Err(FocusError::Training(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_idx}"
                )));
            }
            epoch_loss += loss_value * batch.len() as f64;
            tape.backward(batch_loss, &mut model.store);
            adam.step(&mut model.store).map_err(|e| position_error(epoch, batch_idx, &e))?;
        }
        let train_loss = epoch_loss / train.len() as f64;
        let val_loss = mean_loss(model, val, config.loss_mix, &build_bag_loss)?;
        history.push(EpochLoss { train: train_loss, val: val_loss });
        if config.select_best {
            let target = mean_loss(model, val, 0.0, &build_bag_loss)?;
            if best.as_ref().map_or(true, |(b, _)| target < *b) {
                let snapshot = model.store.iter().map(|p| p.values.clone()).collect();
                best = Some((target, snapshot));
            }
        }
    }
    if let Some((_, snapshot)) = best {
        for (pi, p) in model.store.iter_mut().enumerate() {
            p.values.copy_from_slice(&snapshot[pi]);
        }
    }
    Ok(history)
}

fn position_error(epoch: usize, batch: usize, e: &FocusError) -> FocusError {
    FocusError::Training(format!("at epoch {epoch}, batch {batch}: {e}"))
}

fn mean_loss<F>(model: &StageModel, bags: &[TrainingBag], mix: f64, build: &F) -> Result<f64>
where
    F: Fn(&StageModel, &mut Tape, &ParamStore, &TrainingBag, f64) -> Result<Var>,
{
    let mut total = 0.0;
    for bag in bags {
        let mut tape = Tape::new();
        let loss = build(model, &mut tape, &model.store, bag, mix)?;
        total += tape.value(loss)[0];
    }
    Ok(total / bags.len() as f64)
}

/// Everything one stage reports about one bag.
#[derive(Debug, Clone)]
pub struct StagePrediction {
    pub slice_posteriors: Vec<Vec<f64>>,
    pub patient_posterior: Option<Vec<f64>>,
    pub aggregation: Option<crate::aggregate::AggregationResult>,
}

/// Pure inference on one bag of slice features.
pub fn infer_stage(model: &StageModel, features: &[Vec<f64>]) -> Result<StagePrediction> {
    if features.is_empty() {
        return Err(FocusError::Validation("cannot infer on an empty bag".into()));
    }
    if features.iter().any(|x| x.len() != model.feature_dim) {
        return Err(FocusError::Validation(format!(
            "slice features must have width {}",
            model.feature_dim
        )));
    }
    let store = &model.store;
    let embeddings: Vec<Vec<f64>> = features
        .iter()
        .map(|x| model.encoder.infer(store, x))
        .collect::<Result<Vec<_>>>()?;
    let slice_posteriors: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|h| Ok(softmax_slice(&model.slice_head.infer(store, h)?)))
        .collect::<Result<Vec<_>>>()?;
    let (patient_posterior, aggregation) = match (&model.aggregator, &model.patient_head) {
        (Some(agg), Some(head)) => {
            let result = agg.pool(store, &embeddings, Some(&slice_posteriors))?;
            let logits = match head {
                PatientHead::Single(mlp) => mlp.infer(store, &result.z)?,
                PatientHead::PerClass(rows) => {
                    let class_embeddings = result.class_embeddings.as_ref().unwrap();
                    rows.iter()
                        .zip(class_embeddings)
                        .map(|(row, zk)| Ok(row.infer(store, zk)?[0]))
                        .collect::<Result<Vec<_>>>()?
                }
            };
            (Some(softmax_slice(&logits)), Some(result))
        }
        _ => (None, None),
    };
    Ok(StagePrediction { slice_posteriors, patient_posterior, aggregation })
}
