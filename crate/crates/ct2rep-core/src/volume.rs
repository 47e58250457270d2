//! Volume loading and the CT preprocessing chain: Hounsfield conversion with
//! clipping, spacing resample, center crop/pad, and input normalization.
//!
//! Units move one way through the pipeline (raw -> hounsfield -> normalized);
//! each step checks the unit it receives so a stage cannot be applied twice.

use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const HU_MIN: f64 = -1000.0;
pub const HU_MAX: f64 = 200.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Raw,
    Hounsfield,
    Normalized,
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Unit::Raw => write!(f, "raw"),
            Unit::Hounsfield => write!(f, "hounsfield"),
            Unit::Normalized => write!(f, "normalized"),
        }
    }
}

/// Dense 3-D scalar grid with physical voxel spacing.
/// Data is depth-major: index = (z * height + y) * width + x.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    /// (depth, height, width) in voxels.
    pub shape: (usize, usize, usize),
    /// (z, y, x) voxel spacing in mm.
    pub spacing: (f64, f64, f64),
    pub data: Vec<f64>,
    pub unit: Unit,
}

impl Volume3D {
    pub fn new(shape: (usize, usize, usize), spacing: (f64, f64, f64), data: Vec<f64>, unit: Unit) -> Self {
        assert_eq!(shape.0 * shape.1 * shape.2, data.len(), "shape/data mismatch");
        assert!(
            spacing.0 > 0.0 && spacing.1 > 0.0 && spacing.2 > 0.0,
            "spacing must be positive"
        );
        Volume3D {
            shape,
            spacing,
            data,
            unit,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[(z * self.shape.1 + y) * self.shape.2 + x]
    }
}

/// Per-volume acquisition metadata carried by the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub patient_id: String,
    /// ISO-8601 timestamp; must parse and be totally orderable per patient.
    pub study_time: String,
    pub rescale_slope: f64,
    pub rescale_intercept: f64,
    pub source_path: String,
}

impl VolumeMeta {
    pub fn parsed_study_time(&self) -> Result<chrono::NaiveDateTime, VolumeError> {
        parse_study_time(&self.study_time)
    }
}

pub fn parse_study_time(s: &str) -> Result<chrono::NaiveDateTime, VolumeError> {
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(s) {
        return Ok(dt.naive_utc());
    }
    chrono::NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S").map_err(|_| {
        VolumeError::BadStudyTime {
            value: s.to_string(),
        }
    })
}

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("expected a {expected} volume, got {actual}")]
    WrongUnit { expected: Unit, actual: Unit },
    #[error("cannot resample axis of length {len} (need at least 2 samples)")]
    DegenerateAxis { len: usize },
    #[error("target spacing must be positive, got {spacing:?}")]
    BadTargetSpacing { spacing: (f64, f64, f64) },
    #[error("manifest not found at {path}")]
    ManifestMissing { path: PathBuf },
    #[error("manifest {path}, line {line}: {message}")]
    MalformedRow {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("row {index} ({payload}): payload holds {got} voxels but shape {shape:?} needs {expected}")]
    PayloadMismatch {
        index: usize,
        payload: String,
        got: usize,
        expected: usize,
        shape: [usize; 3],
    },
    #[error("row {index}: cannot read payload {payload}: {message}")]
    PayloadUnreadable {
        index: usize,
        payload: String,
        message: String,
    },
    #[error("unparsable study_time {value:?} (expected ISO-8601)")]
    BadStudyTime { value: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// raw -> HU via `raw * slope + intercept`, clamped to the diagnostic range
/// [-1000, +200].
pub fn convert_and_clip(v: &Volume3D, meta: &VolumeMeta) -> Result<Volume3D, VolumeError> {
    if v.unit != Unit::Raw {
        return Err(VolumeError::WrongUnit {
            expected: Unit::Raw,
            actual: v.unit,
        });
    }
    let data = v
        .data
        .iter()
        .map(|&x| (x * meta.rescale_slope + meta.rescale_intercept).clamp(HU_MIN, HU_MAX))
        .collect();
    Ok(Volume3D {
        shape: v.shape,
        spacing: v.spacing,
        data,
        unit: Unit::Hounsfield,
    })
}

/// Linear map [-1000, +200] -> [-1, +1].
pub fn normalize(v: &Volume3D) -> Result<Volume3D, VolumeError> {
    if v.unit != Unit::Hounsfield {
        return Err(VolumeError::WrongUnit {
            expected: Unit::Hounsfield,
            actual: v.unit,
        });
    }
    let half = (HU_MAX - HU_MIN) / 2.0;
    let mid = (HU_MAX + HU_MIN) / 2.0;
    let data = v.data.iter().map(|&x| (x - mid) / half).collect();
    Ok(Volume3D {
        shape: v.shape,
        spacing: v.spacing,
        data,
        unit: Unit::Normalized,
    })
}

fn resample_axis_len(old_len: usize, old_spacing: f64, target: f64) -> usize {
    ((old_len as f64) * old_spacing / target).round() as usize
}

/// 1-D linear resample along one axis of a flattened 3-D grid.
/// Voxel i sits at physical position i * spacing; output voxel j samples the
/// source at j * target / old, clamped to the valid range.
fn resample_axis(
    data: &[f64],
    shape: (usize, usize, usize),
    axis: usize,
    old_spacing: f64,
    target: f64,
) -> Result<(Vec<f64>, (usize, usize, usize)), VolumeError> {
    let (d, h, w) = shape;
    let old_len = [d, h, w][axis];
    if old_len < 2 {
        return Err(VolumeError::DegenerateAxis { len: old_len });
    }
    let new_len = resample_axis_len(old_len, old_spacing, target);
    let new_shape = match axis {
        0 => (new_len, h, w),
        1 => (d, new_len, w),
        _ => (d, h, new_len),
    };
    let ratio = target / old_spacing;
    let mut out = vec![0.0; new_shape.0 * new_shape.1 * new_shape.2];
    let (nd, nh, nw) = new_shape;
    for z in 0..nd {
        for y in 0..nh {
            for x in 0..nw {
                let j = [z, y, x][axis];
                let f = (j as f64 * ratio).min((old_len - 1) as f64);
                let lo = f.floor() as usize;
                let hi = (lo + 1).min(old_len - 1);
                let t = f - lo as f64;
                let idx = |k: usize| -> usize {
                    let (sz, sy, sx) = match axis {
                        0 => (k, y, x),
                        1 => (z, k, x),
                        _ => (z, y, k),
                    };
                    (sz * h + sy) * w + sx
                };
                out[(z * nh + y) * nw + x] = data[idx(lo)] * (1.0 - t) + data[idx(hi)] * t;
            }
        }
    }
    Ok((out, new_shape))
}

/// Trilinear resample to target (z, y, x) spacing in mm. Axis length becomes
/// round(old_len * old_spacing / target); trilinear interpolation factorizes,
/// so axes are resampled sequentially. Axes whose spacing already matches are
/// passed through untouched.
pub fn resample_to_spacing(v: &Volume3D, target: (f64, f64, f64)) -> Result<Volume3D, VolumeError> {
    if target.0 <= 0.0 || target.1 <= 0.0 || target.2 <= 0.0 {
        return Err(VolumeError::BadTargetSpacing { spacing: target });
    }
    let old = [v.spacing.0, v.spacing.1, v.spacing.2];
    let tgt = [target.0, target.1, target.2];
    let mut data = v.data.clone();
    let mut shape = v.shape;
    for axis in 0..3 {
        if (old[axis] - tgt[axis]).abs() < 1e-12 {
            continue;
        }
        let (new_data, new_shape) = resample_axis(&data, shape, axis, old[axis], tgt[axis])?;
        data = new_data;
        shape = new_shape;
    }
    Ok(Volume3D {
        shape,
        spacing: target,
        data,
        unit: v.unit,
    })
}

/// Per-axis start offset for a center crop; the extra voxel is dropped at the
/// high-index end. For padding the extra fill plane goes to the high end.
fn crop_pad_bounds(cur: usize, target: usize) -> (usize, usize) {
    if cur >= target {
        ((cur - target) / 2, 0) // (crop start, pad before)
    } else {
        (0, (target - cur) / 2)
    }
}

/// Center crop or symmetric pad each axis independently to `target_shape`.
/// Padding fills with air: -1000 HU, or -1 in normalized units.
pub fn crop_or_pad_center(v: &Volume3D, target_shape: (usize, usize, usize)) -> Volume3D {
    let fill = match v.unit {
        Unit::Normalized => -1.0,
        _ => HU_MIN,
    };
    let (td, th, tw) = target_shape;
    let (sd, sh, sw) = v.shape;
    let (cz, pz) = crop_pad_bounds(sd, td);
    let (cy, py) = crop_pad_bounds(sh, th);
    let (cx, px) = crop_pad_bounds(sw, tw);
    let mut out = vec![fill; td * th * tw];
    for z in 0..td {
        let sz = match z.checked_sub(pz) {
            Some(s) if s + cz < sd => s + cz,
            _ => continue,
        };
        for y in 0..th {
            let sy = match y.checked_sub(py) {
                Some(s) if s + cy < sh => s + cy,
                _ => continue,
            };
            for x in 0..tw {
                let sx = match x.checked_sub(px) {
                    Some(s) if s + cx < sw => s + cx,
                    _ => continue,
                };
                out[(z * th + y) * tw + x] = v.at(sz, sy, sx);
            }
        }
    }
    Volume3D {
        shape: target_shape,
        spacing: v.spacing,
        data: out,
        unit: v.unit,
    }
}

// ── Manifest I/O ────────────────────────────────────────────────────

/// One JSON-lines manifest row. `findings` carries the report text for
/// volumes that have one (synthetic data always does).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestRow {
    pub patient_id: String,
    pub study_time: String,
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub slope: f64,
    pub intercept: f64,
    /// Path to the int16 little-endian payload, relative to the manifest.
    pub payload: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub findings: Option<String>,
}

impl ManifestRow {
    pub fn meta(&self) -> VolumeMeta {
        VolumeMeta {
            patient_id: self.patient_id.clone(),
            study_time: self.study_time.clone(),
            rescale_slope: self.slope,
            rescale_intercept: self.intercept,
            source_path: self.payload.clone(),
        }
    }
}

/// A manifest entry with enough context to load its payload on demand.
#[derive(Clone, Debug)]
pub struct ManifestEntry {
    pub row: ManifestRow,
    pub index: usize,
    base_dir: PathBuf,
}

impl ManifestEntry {
    pub fn with_base(row: ManifestRow, index: usize, base_dir: PathBuf) -> Self {
        ManifestEntry {
            row,
            index,
            base_dir,
        }
    }

    pub fn payload_path(&self) -> PathBuf {
        self.base_dir.join(&self.row.payload)
    }

    /// Read the int16 payload into a raw-unit volume.
    pub fn load_volume(&self) -> Result<Volume3D, VolumeError> {
        let path = self.payload_path();
        let mut file = fs::File::open(&path).map_err(|e| VolumeError::PayloadUnreadable {
            index: self.index,
            payload: self.row.payload.clone(),
            message: e.to_string(),
        })?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)
            .map_err(|e| VolumeError::PayloadUnreadable {
                index: self.index,
                payload: self.row.payload.clone(),
                message: e.to_string(),
            })?;
        let expected: usize = self.row.shape.iter().product();
        if bytes.len() != expected * 2 {
            return Err(VolumeError::PayloadMismatch {
                index: self.index,
                payload: self.row.payload.clone(),
                got: bytes.len() / 2,
                expected,
                shape: self.row.shape,
            });
        }
        let data: Vec<f64> = bytes
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64)
            .collect();
        Ok(Volume3D::new(
            (self.row.shape[0], self.row.shape[1], self.row.shape[2]),
            (self.row.spacing[0], self.row.spacing[1], self.row.spacing[2]),
            data,
            Unit::Raw,
        ))
    }
}

/// Parse a JSON-lines volume manifest, preserving file order. Payloads are
/// loaded lazily via [`ManifestEntry::load_volume`].
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>, VolumeError> {
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
        let row: ManifestRow =
            serde_json::from_str(line).map_err(|e| VolumeError::MalformedRow {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: e.to_string(),
            })?;
        if row.spacing.iter().any(|&s| s <= 0.0) {
            return Err(VolumeError::MalformedRow {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("non-positive spacing {:?}", row.spacing),
            });
        }
        parse_study_time(&row.study_time)?;
        entries.push(ManifestEntry {
            row,
            index: entries.len(),
            base_dir: base_dir.clone(),
        });
    }
    Ok(entries)
}

/// Write rows as JSON lines; payloads are written separately.
pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<(), VolumeError> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row).expect("manifest row serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| VolumeError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Write a volume's payload as little-endian int16, depth-major.
pub fn write_payload(path: &Path, v: &Volume3D) -> Result<(), VolumeError> {
    let mut bytes = Vec::with_capacity(v.data.len() * 2);
    for &x in &v.data {
        let clamped = x.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        bytes.extend_from_slice(&clamped.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| VolumeError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
