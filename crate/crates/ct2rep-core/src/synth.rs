//! Seeded synthetic (volume, findings) generator.
//!
//! Volumes are crude geometric phantoms: an air background, a soft-tissue
//! torso ellipsoid, two lung ellipsoids, and one bright signature primitive
//! per present abnormality. Reports are templated findings whose labels
//! round-trip exactly through the rule-based extractor. An abnormality
//! present at one visit persists to the next with a configurable probability,
//! which is what makes the prior report genuinely informative.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::longitudinal::{build_pairs, write_pairs_manifest, PairsRow};
use crate::metrics::{LabelVector, LabelerRules, LABEL_COUNT};
use crate::rng::Rng;
use crate::volume::{
    load_manifest, write_manifest, write_payload, ManifestRow, Unit, Volume3D, VolumeError,
};

/// Raw int16 values chosen so that slope 1 / intercept -1024 lands on the
/// intended Hounsfield value.
const RESCALE_INTERCEPT: f64 = -1024.0;
const RAW_AIR: f64 = 24.0; // -1000 HU
const RAW_LUNG: f64 = 324.0; // -700 HU
const RAW_TISSUE: f64 = 974.0; // -50 HU
const RAW_SIGNATURE: f64 = 1124.0; // +100 HU

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("synthesis needs at least one patient")]
    NoPatients,
}

/// Generation knobs for one dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub min_visits: usize,
    pub max_visits: usize,
    /// Probability that an abnormality present at visit k persists at k+1.
    pub persistence: f64,
    /// Probability that an absent abnormality appears at the next visit.
    pub onset: f64,
    /// Mean number of abnormalities at a patient's first visit.
    pub initial_rate: f64,
    pub volume_shape: [usize; 3],
    pub spacing: [f64; 3],
    /// Fraction of patients in the training split.
    pub train_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 16,
            min_visits: 1,
            max_visits: 3,
            persistence: 0.8,
            onset: 0.08,
            initial_rate: 2.0,
            volume_shape: [24, 48, 48],
            spacing: [1.5, 0.75, 0.75],
            train_fraction: 0.94,
        }
    }
}

/// Everything that determines one synthetic volume/report pair.
#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub volume_shape: [usize; 3],
    pub spacing: [f64; 3],
    pub labels: LabelVector,
    pub seed: u64,
}

fn ellipsoid_mask(
    shape: [usize; 3],
    center: (f64, f64, f64),
    radii: (f64, f64, f64),
    z: usize,
    y: usize,
    x: usize,
) -> bool {
    let dz = (z as f64 / shape[0] as f64 - center.0) / radii.0;
    let dy = (y as f64 / shape[1] as f64 - center.1) / radii.1;
    let dx = (x as f64 / shape[2] as f64 - center.2) / radii.2;
    dz * dz + dy * dy + dx * dx <= 1.0
}

/// Anatomy-flavored placement for each abnormality signature, in fractional
/// coordinates (z, y, x) with fractional radii.
fn signature_geometry(label: usize) -> ((f64, f64, f64), (f64, f64, f64)) {
    // Spread signatures around the torso so they stay distinguishable.
    const SITES: [((f64, f64, f64), (f64, f64, f64)); LABEL_COUNT] = [
        ((0.50, 0.50, 0.50), (0.08, 0.05, 0.05)), // medical material: center line
        ((0.45, 0.45, 0.50), (0.20, 0.04, 0.04)), // arterial wall: long thin tube
        ((0.55, 0.55, 0.45), (0.14, 0.16, 0.16)), // cardiomegaly: big central blob
        ((0.55, 0.60, 0.45), (0.10, 0.08, 0.08)), // pericardial effusion: rim
        ((0.52, 0.50, 0.47), (0.05, 0.05, 0.05)), // coronary calcification
        ((0.80, 0.60, 0.50), (0.08, 0.07, 0.07)), // hiatal hernia: low central
        ((0.40, 0.45, 0.55), (0.06, 0.06, 0.06)), // lymphadenopathy
        ((0.30, 0.40, 0.30), (0.12, 0.10, 0.10)), // emphysema: upper lung
        ((0.70, 0.55, 0.30), (0.08, 0.08, 0.08)), // atelectasis: lower lobe
        ((0.35, 0.45, 0.70), (0.04, 0.04, 0.04)), // lung nodule: small bright
        ((0.45, 0.50, 0.70), (0.10, 0.09, 0.09)), // lung opacity
        ((0.60, 0.50, 0.30), (0.10, 0.06, 0.06)), // fibrotic sequela
        ((0.75, 0.70, 0.70), (0.08, 0.06, 0.10)), // pleural effusion: layering
        ((0.40, 0.50, 0.50), (0.12, 0.12, 0.12)), // mosaic attenuation: broad
        ((0.50, 0.45, 0.35), (0.06, 0.05, 0.05)), // peribronchial thickening
        ((0.65, 0.50, 0.65), (0.09, 0.08, 0.08)), // consolidation
        ((0.55, 0.45, 0.25), (0.07, 0.05, 0.05)), // bronchiectasis
        ((0.35, 0.50, 0.40), (0.05, 0.10, 0.10)), // septal thickening: sheets
    ];
    SITES[label]
}

/// Render the phantom volume for a spec. Overlapping structures compose by
/// maximum intensity.
pub fn synth_volume(spec: &SynthSpec) -> (Volume3D, ManifestRow) {
    let [d, h, w] = spec.volume_shape;
    let mut rng = Rng::seed_from_u64(spec.seed);
    let mut data = vec![0.0; d * h * w];
    let torso_c = (0.5, 0.5, 0.5);
    let torso_r = (0.48, 0.42, 0.42);
    let lung_l = ((0.45, 0.45, 0.32), (0.32, 0.25, 0.16));
    let lung_r = ((0.45, 0.45, 0.68), (0.32, 0.25, 0.16));
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mut v = RAW_AIR + rng.uniform(-4.0, 4.0);
                if ellipsoid_mask(spec.volume_shape, torso_c, torso_r, z, y, x) {
                    v = RAW_TISSUE;
                    if ellipsoid_mask(spec.volume_shape, lung_l.0, lung_l.1, z, y, x)
                        || ellipsoid_mask(spec.volume_shape, lung_r.0, lung_r.1, z, y, x)
                    {
                        v = RAW_LUNG;
                    }
                }
                for label in 0..LABEL_COUNT {
                    if spec.labels.0[label] {
                        let (c, r) = signature_geometry(label);
                        if ellipsoid_mask(spec.volume_shape, c, r, z, y, x) {
                            v = v.max(RAW_SIGNATURE);
                        }
                    }
                }
                data[(z * h + y) * w + x] = v.round();
            }
        }
    }
    let vol = Volume3D::new((d, h, w), (spec.spacing[0], spec.spacing[1], spec.spacing[2]), data, Unit::Raw);
    let row = ManifestRow {
        patient_id: String::new(),
        study_time: String::new(),
        shape: spec.volume_shape,
        spacing: spec.spacing,
        slope: 1.0,
        intercept: RESCALE_INTERCEPT,
        payload: String::new(),
        findings: None,
    };
    (vol, row)
}

/// Positive-finding sentences per label. Each paraphrase embeds one of the
/// labeler's include phrases so reports and labels agree by construction.
fn positive_templates(rules: &LabelerRules, label: usize) -> Vec<String> {
    let phrase = &rules.phrases(label)[0];
    vec![
        format!("There is {phrase}."),
        format!("Findings are consistent with {phrase}."),
        format!("{phrase} is present."),
    ]
}

fn negative_template(rules: &LabelerRules, label: usize, variant: u64) -> String {
    let phrase = &rules.phrases(label)[0];
    match variant % 2 {
        0 => format!("No {phrase}."),
        _ => format!("{phrase} is absent."),
    }
}

/// Templated findings text. Opens with the conserved sentence, then one
/// styled paraphrase per present abnormality, then negations for a styled
/// subset of absent ones. Style bits come from above the visit bits of the
/// seed, so a patient's wording is stable across visits and the prior report
/// predicts the next one wherever findings persist.
pub fn synth_report(spec: &SynthSpec, rules: &LabelerRules) -> String {
    let style = spec.seed >> 20;
    let mut rng = Rng::seed_from_u64(style ^ 0x5EED_4EB0);
    let mut sentences = vec!["Trachea, both main bronchi are open.".to_string()];
    for label in 0..LABEL_COUNT {
        if spec.labels.0[label] {
            let options = positive_templates(rules, label);
            let pick = (style as usize + label) % options.len();
            sentences.push(options[pick].clone());
        }
    }
    for label in 0..LABEL_COUNT {
        if !spec.labels.0[label] && rng.chance(0.12) {
            sentences.push(negative_template(rules, label, style + label as u64));
        }
    }
    sentences.join(" ")
}

/// The manifests written by [`synth_dataset`].
#[derive(Clone, Debug)]
pub struct DatasetPaths {
    pub train_manifest: std::path::PathBuf,
    pub val_manifest: std::path::PathBuf,
    pub train_pairs: std::path::PathBuf,
    pub val_pairs: std::path::PathBuf,
}

fn initial_labels(rng: &mut Rng, rate: f64) -> LabelVector {
    let p = (rate / LABEL_COUNT as f64).min(1.0);
    let mut v = [false; LABEL_COUNT];
    for slot in v.iter_mut() {
        *slot = rng.chance(p);
    }
    LabelVector(v)
}

fn evolve_labels(rng: &mut Rng, prev: &LabelVector, persistence: f64, onset: f64) -> LabelVector {
    let mut v = [false; LABEL_COUNT];
    for (l, slot) in v.iter_mut().enumerate() {
        *slot = if prev.0[l] {
            rng.chance(persistence)
        } else {
            rng.chance(onset)
        };
    }
    LabelVector(v)
}

/// Generate a patient-disjoint train/val dataset with longitudinal pairs,
/// writing payloads and all four manifests under `out_dir`. Fully determined
/// by (config, seed).
pub fn synth_dataset(cfg: &SynthConfig, seed: u64, out_dir: &Path) -> Result<DatasetPaths, SynthError> {
    if cfg.n_patients == 0 {
        return Err(SynthError::NoPatients);
    }
    fs::create_dir_all(out_dir).map_err(|e| VolumeError::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;
    let rules = LabelerRules::default_rules();
    let root = Rng::seed_from_u64(seed);
    let n_train = ((cfg.n_patients as f64) * cfg.train_fraction).round() as usize;
    let n_train = n_train.clamp(
        if cfg.n_patients > 1 { 1 } else { 0 },
        cfg.n_patients,
    );

    let mut train_rows = Vec::new();
    let mut val_rows = Vec::new();
    for p in 0..cfg.n_patients {
        let mut prng = root.derive(p as u64 + 1);
        let patient_id = format!("p{p:04}");
        let visits = cfg.min_visits as u64
            + if cfg.max_visits > cfg.min_visits {
                prng.next_below((cfg.max_visits - cfg.min_visits) as u64 + 1)
            } else {
                0
            };
        let mut labels = initial_labels(&mut prng, cfg.initial_rate);
        for visit in 0..visits {
            if visit > 0 {
                labels = evolve_labels(&mut prng, &labels, cfg.persistence, cfg.onset);
            }
            // XOR-only mixing keeps patient bits above bit 20 (the report
            // style region) and visit bits below, so wording is stable
            // across a patient's visits.
            let spec = SynthSpec {
                volume_shape: cfg.volume_shape,
                spacing: cfg.spacing,
                labels,
                seed: seed ^ ((p as u64) << 24) ^ (visit << 1) ^ 0x9E37,
            };
            let (vol, mut row) = synth_volume(&spec);
            let payload = format!("{patient_id}_v{visit}.i16");
            write_payload(&out_dir.join(&payload), &vol)?;
            row.patient_id = patient_id.clone();
            row.study_time = format!("2024-{:02}-{:02}T08:00:00Z", 1 + visit / 28, 1 + visit % 28);
            row.payload = payload;
            row.findings = Some(synth_report(&spec, &rules));
            if p < n_train {
                train_rows.push(row);
            } else {
                val_rows.push(row);
            }
        }
    }

    let paths = DatasetPaths {
        train_manifest: out_dir.join("train_manifest.jsonl"),
        val_manifest: out_dir.join("val_manifest.jsonl"),
        train_pairs: out_dir.join("train_pairs.jsonl"),
        val_pairs: out_dir.join("val_pairs.jsonl"),
    };
    write_manifest(&paths.train_manifest, &train_rows)?;
    write_manifest(&paths.val_manifest, &val_rows)?;
    let train_pairs: Vec<PairsRow> = build_pairs(&load_manifest(&paths.train_manifest)?)?;
    let val_pairs: Vec<PairsRow> = build_pairs(&load_manifest(&paths.val_manifest)?)?;
    write_pairs_manifest(&paths.train_pairs, &train_pairs)?;
    write_pairs_manifest(&paths.val_pairs, &val_pairs)?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::extract_labels;
    use crate::volume::load_manifest;

    fn spec_with(labels: &[usize], seed: u64) -> SynthSpec {
        let mut v = [false; LABEL_COUNT];
        for &l in labels {
            v[l] = true;
        }
        SynthSpec {
            volume_shape: [8, 16, 16],
            spacing: [1.5, 0.75, 0.75],
            labels: LabelVector(v),
            seed,
        }
    }

    #[test]
    fn volume_is_seed_deterministic() {
        let spec = spec_with(&[2, 9], 42);
        let (a, _) = synth_volume(&spec);
        let (b, _) = synth_volume(&spec);
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn nodule_spec_produces_bright_cluster() {
        let with = synth_volume(&spec_with(&[9], 7)).0;
        let without = synth_volume(&spec_with(&[], 7)).0;
        let bright_with = with.data.iter().filter(|&&v| v >= RAW_SIGNATURE).count();
        let bright_without = without.data.iter().filter(|&&v| v >= RAW_SIGNATURE).count();
        assert!(bright_with > bright_without);
        assert!(bright_with > 0);
    }

    #[test]
    fn torso_only_volume_has_no_signature() {
        let v = synth_volume(&spec_with(&[], 3)).0;
        assert!(v.data.iter().all(|&x| x < RAW_SIGNATURE));
        // Air, lung, and tissue intensities all appear.
        assert!(v.data.iter().any(|&x| x < RAW_AIR + 8.0));
        assert!(v.data.contains(&RAW_LUNG));
        assert!(v.data.contains(&RAW_TISSUE));
    }

    #[test]
    fn report_opens_with_conserved_sentence_and_round_trips() {
        let rules = LabelerRules::default_rules();
        for seed in 0..50u64 {
            let labels: Vec<usize> = (0..LABEL_COUNT).filter(|l| (seed >> l) & 1 == 1).collect();
            let spec = spec_with(&labels, seed.wrapping_mul(0xABCD).wrapping_add(5));
            let report = synth_report(&spec, &rules);
            assert!(report.starts_with("Trachea, both main bronchi are open."));
            assert_eq!(extract_labels(&report), spec.labels, "seed {seed}: {report}");
        }
    }

    #[test]
    fn empty_label_report_is_negations_only() {
        let rules = LabelerRules::default_rules();
        let spec = spec_with(&[], 99);
        let report = synth_report(&spec, &rules);
        assert_eq!(extract_labels(&report), LabelVector::none());
        assert_eq!(synth_report(&spec, &rules), report);
    }

    #[test]
    fn dataset_split_is_patient_disjoint_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_patients: 10,
            min_visits: 1,
            max_visits: 3,
            volume_shape: [4, 8, 8],
            ..Default::default()
        };
        let paths = synth_dataset(&cfg, 11, dir.path()).unwrap();
        let train = load_manifest(&paths.train_manifest).unwrap();
        let val = load_manifest(&paths.val_manifest).unwrap();
        assert!(!train.is_empty());
        assert!(!val.is_empty());
        let train_patients: std::collections::BTreeSet<_> =
            train.iter().map(|e| e.row.patient_id.clone()).collect();
        let val_patients: std::collections::BTreeSet<_> =
            val.iter().map(|e| e.row.patient_id.clone()).collect();
        assert!(train_patients.is_disjoint(&val_patients));

        // Strictly increasing study times per patient.
        for pid in &train_patients {
            let times: Vec<_> = train
                .iter()
                .filter(|e| &e.row.patient_id == pid)
                .map(|e| e.row.study_time.clone())
                .collect();
            let mut sorted = times.clone();
            sorted.sort();
            sorted.dedup();
            assert_eq!(times.len(), sorted.len());
        }

        // Byte-determinism of the whole dataset.
        let dir2 = tempfile::tempdir().unwrap();
        let paths2 = synth_dataset(&cfg, 11, dir2.path()).unwrap();
        let a = std::fs::read(&paths.train_manifest).unwrap();
        let b = std::fs::read(&paths2.train_manifest).unwrap();
        assert_eq!(a, b);
        let a = std::fs::read(dir.path().join("p0000_v0.i16")).unwrap();
        let b = std::fs::read(dir2.path().join("p0000_v0.i16")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_visit_patients_make_empty_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_patients: 4,
            min_visits: 1,
            max_visits: 1,
            volume_shape: [4, 8, 8],
            ..Default::default()
        };
        let paths = synth_dataset(&cfg, 5, dir.path()).unwrap();
        let pairs = crate::longitudinal::load_pairs_manifest(&paths.train_pairs).unwrap();
        assert!(pairs.is_empty());
    }
}
