//! Run configuration: one JSON file drives every subcommand.
//!
//! The top-level `seed` is the only seed a user sets. Loading a config
//! overwrites `synth.seed` with it and the three per-stage training
//! seeds with values derived from it, so any seed fields written in the
//! JSON sections are ignored. The `FOCUSKIT_SEED` environment variable,
//! when set, overrides the file's `seed` before propagation.

use std::env;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use focuskit::aggregate::{AggregatorKind, AggregatorSpec};
use focuskit::evalkit::GroupBy;
use focuskit::pipeline::PipelineConfig;
use focuskit::rng::derive_seed;
use focuskit::stages::{arch_with_aggregator, StageArch, StageKind, TrainConfig};
use focuskit::synthgen::{CenterShift, CohortSpec};
use focuskit::{FocusError, Result};

/// Environment variable that overrides the config file's `seed`.
pub const SEED_ENV_VAR: &str = "FOCUSKIT_SEED";

/// Per-stage training hyperparameters. Seeds here are derived from the
/// top-level seed at load time, never read from the file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub quality: TrainConfig,
    pub abnormal: TrainConfig,
    pub disease: TrainConfig,
    /// Warm-start the abnormality and disease encoders from the trained
    /// quality encoder.
    pub share_encoder: bool,
}

/// Pooling choice for the patient-level stages. The class count is a
/// property of each stage, so it is not configurable here.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregatorSection {
    pub kind: AggregatorKind,
    pub hidden_dim: usize,
    pub certainty_floor: f64,
    pub uncertainty_enabled: bool,
}

impl AggregatorSection {
    /// Expand into a full spec for one stage.
    pub fn spec_for(&self, stage: StageKind) -> AggregatorSpec {
        AggregatorSpec {
            kind: self.kind,
            hidden_dim: self.hidden_dim,
            certainty_floor: self.certainty_floor,
            uncertainty_enabled: self.uncertainty_enabled,
            n_classes: stage.n_classes(),
        }
    }
}

/// Evaluation settings: bootstrap resample count and report grouping.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub resamples: usize,
    pub group_by: GroupBy,
}

/// Everything a full generate/train/infer/eval run needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every other seed in the run derives from it.
    pub seed: u64,
    pub synth: CohortSpec,
    pub train: TrainSection,
    pub aggregator: AggregatorSection,
    pub pipeline: PipelineConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Overwrite the section seeds from the master seed. Called on every
    /// load so the master seed is the single source of randomness.
    pub fn propagate_seed(&mut self) {
        self.synth.seed = self.seed;
        self.train.quality.seed = derive_seed(self.seed, 1);
        self.train.abnormal.seed = derive_seed(self.seed, 2);
        self.train.disease.seed = derive_seed(self.seed, 3);
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.quality.validate()?;
        self.train.abnormal.validate()?;
        self.train.disease.validate()?;
        self.pipeline.validate()?;
        // Validate the pooler against the stricter stage (disease has
        // the most classes); per-stage specs only differ in n_classes.
        self.aggregator.spec_for(StageKind::Disease).validate()?;
        if self.eval.resamples == 0 {
            return Err(FocusError::Spec("eval.resamples must be at least 1".into()));
        }
        Ok(())
    }

    /// Architecture for one stage under this config's pooling choice.
    pub fn arch_for(&self, stage: StageKind) -> StageArch {
        let mut arch = arch_with_aggregator(
            stage,
            self.synth.feature_dim,
            self.seed,
            self.aggregator.kind,
        );
        if let Some(agg) = arch.aggregator.as_mut() {
            *agg = self.aggregator.spec_for(stage);
        }
        arch
    }
}

/// Benchmark defaults: a 350-patient four-center cohort that trains all
/// three stages in a few minutes on one core.
pub fn default_config() -> RunConfig {
    let d = 16;
    let offset = |v: f64| vec![v; d];
    let mut config = RunConfig {
        seed: 42,
        synth: CohortSpec {
            n_patients: 350,
            slices_per_volume: 32,
            feature_dim: d,
            class_prevalence: vec![
                0.5, 0.0625, 0.0625, 0.0625, 0.0625, 0.0625, 0.0625, 0.0625, 0.0625,
            ],
            lesion_fraction: 0.1,
            lesion_margin: 4.0,
            ungradable_slice_rate: 0.15,
            centers: vec![
                CenterShift {
                    center_id: "site_a".into(),
                    feature_scale: 1.0,
                    feature_offset: offset(0.0),
                    noise_sigma: 0.05,
                },
                CenterShift {
                    center_id: "site_b".into(),
                    feature_scale: 1.1,
                    feature_offset: offset(0.2),
                    noise_sigma: 0.05,
                },
                CenterShift {
                    center_id: "site_c".into(),
                    feature_scale: 0.9,
                    feature_offset: offset(-0.15),
                    noise_sigma: 0.1,
                },
                CenterShift {
                    center_id: "site_d".into(),
                    feature_scale: 1.0,
                    feature_offset: offset(0.1),
                    noise_sigma: 0.1,
                },
            ],
            seed: 42,
            train_frac: 4.0 / 7.0,
            val_frac: 1.0 / 7.0,
        },
        train: TrainSection {
            quality: TrainConfig {
                epochs: 30,
                batch_size: 8,
                lr: 3e-3,
                seed: 0,
                loss_mix: 1.0,
                ..TrainConfig::default()
            },
            abnormal: TrainConfig {
                epochs: 150,
                batch_size: 4,
                lr: 0.01,
                seed: 0,
                loss_mix: 0.95,
                weight_decay: 0.1,
                ..TrainConfig::default()
            },
            disease: TrainConfig {
                epochs: 150,
                batch_size: 4,
                lr: 0.01,
                seed: 0,
                loss_mix: 0.9,
                weight_decay: 0.1,
                ..TrainConfig::default()
            },
            share_encoder: true,
        },
        aggregator: AggregatorSection {
            kind: AggregatorKind::UAAC,
            hidden_dim: 64,
            certainty_floor: 0.01,
            uncertainty_enabled: true,
        },
        pipeline: PipelineConfig::default(),
        eval: EvalSection { resamples: 1000, group_by: GroupBy::All },
    };
    config.propagate_seed();
    config
}

/// Read a config file, apply the [`SEED_ENV_VAR`] override, propagate
/// the master seed, and validate.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| {
        FocusError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    let config: RunConfig = serde_json::from_str(&text)
        .map_err(|e| FocusError::Spec(format!("{}: {e}", path.display())))?;
    finalize(config)
}

/// The config a command runs under: the file when given, the benchmark
/// defaults otherwise. Both paths honor [`SEED_ENV_VAR`].
pub fn resolve_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => load_config(p),
        None => finalize(default_config()),
    }
}

fn finalize(mut config: RunConfig) -> Result<RunConfig> {
    if let Ok(raw) = env::var(SEED_ENV_VAR) {
        config.seed = raw.parse().map_err(|_| {
            FocusError::Spec(format!("{SEED_ENV_VAR} must be an integer, got {raw:?}"))
        })?;
    }
    config.propagate_seed();
    config.validate()?;
    Ok(config)
}
