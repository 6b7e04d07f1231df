//! Shared domain types, the on-disk cohort format, and validated ingestion.
//!
//! A cohort lives on disk as a JSON manifest plus one tensor file per
//! volume (see [`tensor`] for the byte format). Loading validates every
//! invariant: parallel label sequences share the slice count, diseased
//! volumes contain at least one abnormal slice, normal volumes contain
//! none, and every feature vector matches the cohort's declared dimension.

pub mod tensor;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{FocusError, Result};

/// Per-slice gradability label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QualityLabel {
    Gradable,
    Ungradable,
}

/// Patient-level disease label: Normal plus eight retinal diseases.
/// Index 0 is Normal; the wire format uses the abbreviation strings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiseaseLabel {
    Normal,
    AMD,
    CNV,
    CSC,
    DR,
    MH,
    ME,
    ERM,
    RP,
}

/// Number of disease classes including Normal.
pub const N_DISEASE_CLASSES: usize = 9;

impl DiseaseLabel {
    pub const ALL: [DiseaseLabel; N_DISEASE_CLASSES] = [
        DiseaseLabel::Normal,
        DiseaseLabel::AMD,
        DiseaseLabel::CNV,
        DiseaseLabel::CSC,
        DiseaseLabel::DR,
        DiseaseLabel::MH,
        DiseaseLabel::ME,
        DiseaseLabel::ERM,
        DiseaseLabel::RP,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&d| d == self).unwrap()
    }

    pub fn from_index(idx: usize) -> Result<Self> {
        Self::ALL
            .get(idx)
            .copied()
            .ok_or_else(|| FocusError::Validation(format!("disease index {idx} out of range")))
    }

    pub fn name(self) -> &'static str {
        match self {
            DiseaseLabel::Normal => "Normal",
            DiseaseLabel::AMD => "AMD",
            DiseaseLabel::CNV => "CNV",
            DiseaseLabel::CSC => "CSC",
            DiseaseLabel::DR => "DR",
            DiseaseLabel::MH => "MH",
            DiseaseLabel::ME => "ME",
            DiseaseLabel::ERM => "ERM",
            DiseaseLabel::RP => "RP",
        }
    }
}

/// One encoded B-scan: a fixed-dimension feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceFeature {
    pub values: Vec<f64>,
}

impl SliceFeature {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FocusError::Validation(
                "slice feature contains non-finite entries".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Train/validation/test assignment for one volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// The ordered slices of one eye plus ground-truth labels (the MIL bag).
#[derive(Debug, Clone)]
pub struct VolumeBag {
    pub patient_id: String,
    pub center_id: String,
    pub split: Split,
    pub slices: Vec<SliceFeature>,
    pub slice_quality: Vec<QualityLabel>,
    pub slice_abnormal: Vec<bool>,
    pub patient_disease: DiseaseLabel,
}

impl VolumeBag {
    /// Validates all bag invariants at construction.
    pub fn new(
        patient_id: String,
        center_id: String,
        split: Split,
        slices: Vec<SliceFeature>,
        slice_quality: Vec<QualityLabel>,
        slice_abnormal: Vec<bool>,
        patient_disease: DiseaseLabel,
    ) -> Result<Self> {
        let n = slices.len();
        if n == 0 {
            return Err(FocusError::Validation(format!(
                "volume {patient_id} has no slices"
            )));
        }
        if slice_quality.len() != n || slice_abnormal.len() != n {
            return Err(FocusError::Validation(format!(
                "volume {patient_id}: label sequences do not match {n} slices"
            )));
        }
        let dim = slices[0].dim();
        if slices.iter().any(|s| s.dim() != dim) {
            return Err(FocusError::Validation(format!(
                "volume {patient_id}: inconsistent feature dimensions"
            )));
        }
        let any_abnormal = slice_abnormal.iter().any(|&a| a);
        match patient_disease {
            DiseaseLabel::Normal if any_abnormal => {
                return Err(FocusError::Validation(format!(
                    "volume {patient_id}: labeled Normal but has abnormal slices"
                )))
            }
            d if d != DiseaseLabel::Normal && !any_abnormal => {
                return Err(FocusError::Validation(format!(
                    "volume {patient_id}: labeled {} but has no abnormal slice",
                    d.name()
                )))
            }
            _ => {}
        }
        Ok(Self {
            patient_id,
            center_id,
            split,
            slices,
            slice_quality,
            slice_abnormal,
            patient_disease,
        })
    }

    pub fn n_slices(&self) -> usize {
        self.slices.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.slices[0].dim()
    }

    pub fn is_abnormal(&self) -> bool {
        self.patient_disease != DiseaseLabel::Normal
    }
}

/// One manifest row: labels plus the path of the volume's tensor file
/// (relative to the manifest's directory).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeEntry {
    pub patient_id: String,
    pub center_id: String,
    pub tensor_path: String,
    pub split: Split,
    pub patient_disease: DiseaseLabel,
    pub slice_quality: Vec<QualityLabel>,
    pub slice_abnormal: Vec<bool>,
}

/// The cohort manifest: feature dimension plus one entry per volume.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortManifest {
    pub schema_version: u32,
    pub feature_dim: usize,
    pub volumes: Vec<VolumeEntry>,
}

impl CohortManifest {
    /// Structural validation: unique patient ids, non-empty label rows,
    /// consistent per-entry label lengths. File contents are checked when
    /// volumes are loaded.
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(FocusError::Validation("feature_dim must be positive".into()));
        }
        let mut seen = BTreeSet::new();
        for v in &self.volumes {
            if !seen.insert(v.patient_id.as_str()) {
                return Err(FocusError::Validation(format!(
                    "duplicate patient_id {}",
                    v.patient_id
                )));
            }
            if v.slice_quality.is_empty() {
                return Err(FocusError::Validation(format!(
                    "volume {}: empty slice labels",
                    v.patient_id
                )));
            }
            if v.slice_quality.len() != v.slice_abnormal.len() {
                return Err(FocusError::Validation(format!(
                    "volume {}: slice_quality and slice_abnormal lengths differ",
                    v.patient_id
                )));
            }
        }
        Ok(())
    }
}

/// A fully loaded cohort.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub feature_dim: usize,
    pub bags: Vec<VolumeBag>,
}

impl Cohort {
    pub fn split(&self, split: Split) -> Vec<&VolumeBag> {
        self.bags.iter().filter(|b| b.split == split).collect()
    }
}

/// Read and structurally validate a manifest file.
pub fn load_manifest(manifest_path: &Path) -> Result<CohortManifest> {
    let text = fs::read_to_string(manifest_path).map_err(|e| {
        FocusError::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", manifest_path.display()),
        ))
    })?;
    let manifest: CohortManifest = serde_json::from_str(&text)
        .map_err(|e| FocusError::Format(format!("manifest {}: {e}", manifest_path.display())))?;
    if manifest.schema_version != 1 {
        return Err(FocusError::Format(format!(
            "unsupported manifest schema_version {}",
            manifest.schema_version
        )));
    }
    manifest.validate()?;
    Ok(manifest)
}

/// Load one volume's tensor file and assemble the validated bag.
pub fn load_volume(manifest_dir: &Path, feature_dim: usize, entry: &VolumeEntry) -> Result<VolumeBag> {
    let path = manifest_dir.join(&entry.tensor_path);
    let (shape, data) = tensor::read_tensor(&path)
        .map_err(|e| FocusError::Format(format!("volume {}: {e}", entry.patient_id)))?;
    if shape.len() != 2 {
        return Err(FocusError::Validation(format!(
            "volume {}: expected rank-2 tensor, got shape {:?}",
            entry.patient_id, shape
        )));
    }
    let (n, d) = (shape[0], shape[1]);
    if d != feature_dim {
        return Err(FocusError::Validation(format!(
            "volume {}: feature dim {} does not match cohort dim {}",
            entry.patient_id, d, feature_dim
        )));
    }
    if n != entry.slice_quality.len() {
        return Err(FocusError::Validation(format!(
            "volume {}: tensor holds {} slices but labels describe {}",
            entry.patient_id,
            n,
            entry.slice_quality.len()
        )));
    }
    let slices = data
        .chunks_exact(d)
        .map(|row| SliceFeature::new(row.iter().map(|&v| v as f64).collect()))
        .collect::<Result<Vec<_>>>()?;
    VolumeBag::new(
        entry.patient_id.clone(),
        entry.center_id.clone(),
        entry.split,
        slices,
        entry.slice_quality.clone(),
        entry.slice_abnormal.clone(),
        entry.patient_disease,
    )
}

/// Load a full cohort: manifest plus every referenced tensor file.
/// Order-preserving and deterministic; the first invariant breach aborts
/// the load with the offending patient named.
pub fn load_cohort(manifest_path: &Path) -> Result<Cohort> {
    let manifest = load_manifest(manifest_path)?;
    let dir = manifest_dir(manifest_path);
    let bags = manifest
        .volumes
        .iter()
        .map(|entry| load_volume(&dir, manifest.feature_dim, entry))
        .collect::<Result<Vec<_>>>()?;
    Ok(Cohort {
        feature_dim: manifest.feature_dim,
        bags,
    })
}

pub fn manifest_dir(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_volume(dir: &Path, id: &str, n: usize, d: usize, disease: DiseaseLabel) -> VolumeEntry {
        let data: Vec<f32> = (0..n * d).map(|i| i as f32 * 0.25).collect();
        let rel = format!("{id}.f32");
        tensor::write_tensor(&dir.join(&rel), &[n, d], &data).unwrap();
        let mut abnormal = vec![false; n];
        if disease != DiseaseLabel::Normal {
            abnormal[0] = true;
        }
        VolumeEntry {
            patient_id: id.to_string(),
            center_id: "c0".to_string(),
            tensor_path: rel,
            split: Split::Train,
            patient_disease: disease,
            slice_quality: vec![QualityLabel::Gradable; n],
            slice_abnormal: abnormal,
        }
    }

    fn testdir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("focuskit-datamodel-tests").join(name);
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn load_cohort_roundtrips_two_volumes() {
        let dir = testdir("two-volumes");
        let volumes = vec![
            write_volume(&dir, "p0", 4, 3, DiseaseLabel::Normal),
            write_volume(&dir, "p1", 4, 3, DiseaseLabel::AMD),
        ];
        let manifest = CohortManifest {
            schema_version: 1,
            feature_dim: 3,
            volumes,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
        let cohort = load_cohort(&path).unwrap();
        assert_eq!(cohort.bags.len(), 2);
        assert!(cohort.bags.iter().all(|b| b.n_slices() == 4 && b.feature_dim() == 3));
        assert_eq!(cohort.bags[1].patient_disease, DiseaseLabel::AMD);
    }

    #[test]
    fn normal_patient_with_abnormal_slice_is_rejected() {
        let dir = testdir("bad-normal");
        let mut entry = write_volume(&dir, "p7", 3, 2, DiseaseLabel::Normal);
        entry.slice_abnormal[1] = true;
        let manifest = CohortManifest {
            schema_version: 1,
            feature_dim: 2,
            volumes: vec![entry],
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string(&manifest).unwrap()).unwrap();
        let err = load_cohort(&path).unwrap_err();
        assert!(err.to_string().contains("p7"), "{err}");
    }

    #[test]
    fn duplicate_patient_ids_are_rejected() {
        let dir = testdir("dup-ids");
        let volumes = vec![
            write_volume(&dir, "p0", 2, 2, DiseaseLabel::Normal),
            write_volume(&dir, "p0", 2, 2, DiseaseLabel::Normal),
        ];
        let manifest = CohortManifest {
            schema_version: 1,
            feature_dim: 2,
            volumes,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string(&manifest).unwrap()).unwrap();
        let err = load_cohort(&path).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn diseased_patient_without_abnormal_slice_is_rejected() {
        let err = VolumeBag::new(
            "px".into(),
            "c0".into(),
            Split::Train,
            vec![SliceFeature::new(vec![0.0]).unwrap()],
            vec![QualityLabel::Gradable],
            vec![false],
            DiseaseLabel::DR,
        )
        .unwrap_err();
        assert!(err.to_string().contains("px"), "{err}");
    }

    #[test]
    fn disease_indices_roundtrip() {
        for (i, d) in DiseaseLabel::ALL.iter().enumerate() {
            assert_eq!(d.index(), i);
            assert_eq!(DiseaseLabel::from_index(i).unwrap(), *d);
        }
        assert!(DiseaseLabel::from_index(9).is_err());
    }
}
