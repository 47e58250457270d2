//! Longitudinal pairing: group visits per patient, order them by study time,
//! and emit every (earlier, later) pair, plus the pairs-manifest format.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::volume::{parse_study_time, ManifestEntry, ManifestRow, Volume3D, VolumeError};

/// One training sample for the longitudinal model: the prior visit's volume
/// and findings condition generation for the later visit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairsRow {
    pub patient_id: String,
    pub old: ManifestRow,
    pub new: ManifestRow,
}

#[derive(Clone, Debug)]
pub struct PairsEntry {
    pub row: PairsRow,
    pub index: usize,
    base_dir: PathBuf,
}

impl PairsEntry {
    fn load(&self, row: &ManifestRow) -> Result<Volume3D, VolumeError> {
        let entry = ManifestEntry::with_base(row.clone(), self.index, self.base_dir.clone());
        entry.load_volume()
    }

    pub fn load_old(&self) -> Result<Volume3D, VolumeError> {
        self.load(&self.row.old)
    }

    pub fn load_new(&self) -> Result<Volume3D, VolumeError> {
        self.load(&self.row.new)
    }
}

/// All ordered (earlier, later) visit pairs per patient: a patient with k
/// visits contributes k*(k-1)/2 rows. Ties in study time break by payload
/// path; manifest order decides nothing.
pub fn build_pairs(entries: &[ManifestEntry]) -> Result<Vec<PairsRow>, VolumeError> {
    // Group by patient, preserving first-seen patient order.
    let mut patients: Vec<(String, Vec<&ManifestEntry>)> = Vec::new();
    for e in entries {
        match patients.iter_mut().find(|(p, _)| *p == e.row.patient_id) {
            Some((_, v)) => v.push(e),
            None => patients.push((e.row.patient_id.clone(), vec![e])),
        }
    }
    let mut pairs = Vec::new();
    for (patient_id, mut visits) in patients {
        let mut keyed = Vec::with_capacity(visits.len());
        for e in visits.drain(..) {
            keyed.push((parse_study_time(&e.row.study_time)?, e));
        }
        keyed.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.row.payload.cmp(&b.1.row.payload)));
        for i in 0..keyed.len() {
            for j in i + 1..keyed.len() {
                pairs.push(PairsRow {
                    patient_id: patient_id.clone(),
                    old: keyed[i].1.row.clone(),
                    new: keyed[j].1.row.clone(),
                });
            }
        }
    }
    Ok(pairs)
}

pub fn write_pairs_manifest(path: &Path, rows: &[PairsRow]) -> Result<(), VolumeError> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row).expect("pairs row serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| VolumeError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn load_pairs_manifest(path: &Path) -> Result<Vec<PairsEntry>, VolumeError> {
    if !path.exists() {
        return Err(VolumeError::ManifestMissing {
            path: path.to_path_buf(),
        });
    }
    let text = fs::read_to_string(path).map_err(|e| VolumeError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: PairsRow = serde_json::from_str(line).map_err(|e| VolumeError::MalformedRow {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        entries.push(PairsEntry {
            row,
            index: entries.len(),
            base_dir: base_dir.clone(),
        });
    }
    Ok(entries)
}
