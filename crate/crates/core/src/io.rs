//! On-disk formats: volume file sets, correction fields, phantom truth,
//! optimizer traces and en-face images.
//!
//! A volume file set is a directory holding `meta.json`, `data.raw`
//! (little-endian `f32`, `(i, j, k)` row-major with depth fastest) and
//! `validity.raw` (one byte per voxel, 0 or 1, same order).

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correction::EnfaceImage;
use crate::optimize::OptimizationTrace;
use crate::phantom::{PhantomSpec, PhantomTruth};
use crate::spline::{CorrectionField, CorrectionSet, KnotLayout, SplineError};
use crate::volume::{RasterVolume, ScanDirection, Spacing, VolumeError};

pub const META_FILE: &str = "meta.json";
pub const DATA_FILE: &str = "data.raw";
pub const VALIDITY_FILE: &str = "validity.raw";

const DTYPE: &str = "f32le";
const LAYOUT: &str = "ijk-k-fastest";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{path}: {reason}")]
    HeaderMismatch { path: PathBuf, reason: String },
    #[error("{path}: expected {expected} bytes, found {found}")]
    SizeMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: {source}")]
    IoFailure {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    InvalidContent { path: PathBuf, reason: String },
}

fn io_failure(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::IoFailure {
        path: path.to_path_buf(),
        source,
    }
}

fn invalid(path: &Path, reason: impl ToString) -> IoError {
    IoError::InvalidContent {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            IoError::MissingFile(path.to_path_buf())
        } else {
            io_failure(path)(e)
        }
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    fs::write(path, bytes).map_err(io_failure(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| invalid(path, e))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| invalid(path, e))
}

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub dims: [usize; 3],
    pub direction: ScanDirection,
    pub transverse_spacing_mm: f64,
    pub axial_spacing_um: f64,
    pub dtype: String,
    pub layout: String,
}

/// Writes `volume` as a file set in `dir`, creating the directory.
pub fn write_volume(dir: &Path, volume: &RasterVolume) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(io_failure(dir))?;
    let meta = VolumeMeta {
        dims: volume.dims(),
        direction: volume.direction(),
        transverse_spacing_mm: volume.spacing().transverse_mm,
        axial_spacing_um: volume.spacing().axial_um,
        dtype: DTYPE.into(),
        layout: LAYOUT.into(),
    };
    write_json(&dir.join(META_FILE), &meta)?;

    let mut data = Vec::with_capacity(volume.data().len() * 4);
    for &v in volume.data().iter() {
        data.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_file(&dir.join(DATA_FILE), &data)?;

    let n_d = volume.n_depth();
    let mut validity = Vec::with_capacity(volume.data().len());
    for &v in volume.ascan_validity().iter() {
        validity.extend(std::iter::repeat_n(u8::from(v), n_d));
    }
    write_file(&dir.join(VALIDITY_FILE), &validity)
}

/// Reads a file set written by [`write_volume`].
pub fn read_volume(dir: &Path) -> Result<RasterVolume, IoError> {
    let meta_path = dir.join(META_FILE);
    let meta: VolumeMeta = read_json(&meta_path).map_err(|e| match e {
        IoError::InvalidContent { path, reason } => IoError::HeaderMismatch { path, reason },
        other => other,
    })?;
    let header = |reason: String| IoError::HeaderMismatch {
        path: meta_path.clone(),
        reason,
    };
    if meta.dtype != DTYPE {
        return Err(header(format!("unsupported dtype '{}'", meta.dtype)));
    }
    if meta.layout != LAYOUT {
        return Err(header(format!("unsupported layout '{}'", meta.layout)));
    }
    let count = meta
        .dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&n| n > 0)
        .ok_or_else(|| header(format!("invalid dims {:?}", meta.dims)))?;

    let data_path = dir.join(DATA_FILE);
    let raw = read_file(&data_path)?;
    if raw.len() != 4 * count {
        return Err(IoError::SizeMismatch {
            path: data_path,
            expected: 4 * count,
            found: raw.len(),
        });
    }
    let values: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();

    let validity_path = dir.join(VALIDITY_FILE);
    let raw = read_file(&validity_path)?;
    if raw.len() != count {
        return Err(IoError::SizeMismatch {
            path: validity_path,
            expected: count,
            found: raw.len(),
        });
    }
    if raw.iter().any(|&b| b > 1) {
        return Err(invalid(&validity_path, "validity bytes must be 0 or 1"));
    }
    let [a, b, c] = meta.dims;
    let data = Array3::from_shape_vec((a, b, c), values).expect("length checked");
    let validity = Array3::from_shape_vec((a, b, c), raw.into_iter().map(|v| v == 1).collect())
        .expect("length checked");
    RasterVolume::new(
        data,
        meta.direction,
        Spacing::new(meta.transverse_spacing_mm, meta.axial_spacing_um),
        validity,
    )
    .map_err(|e: VolumeError| invalid(dir, e))
}

/// Serialized correction field of one volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldRecord {
    pub n_bscans: usize,
    pub n_ascans: usize,
    pub knot_positions: Vec<f64>,
    pub density_per_mm: f64,
    /// One row of knot values per B-scan.
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionsFile {
    pub volumes: Vec<FieldRecord>,
}

impl CorrectionsFile {
    pub fn from_set(set: &CorrectionSet) -> Self {
        CorrectionsFile {
            volumes: set
                .fields
                .iter()
                .map(|f| FieldRecord {
                    n_bscans: f.n_bscans(),
                    n_ascans: f.layout.n_ascans(),
                    knot_positions: f.layout.positions().to_vec(),
                    density_per_mm: f.layout.density_per_mm(),
                    values: f.values.outer_iter().map(|r| r.to_vec()).collect(),
                })
                .collect(),
        }
    }

    pub fn to_set(&self) -> Result<CorrectionSet, SplineError> {
        let mut fields = Vec::with_capacity(self.volumes.len());
        for r in &self.volumes {
            let layout = KnotLayout::from_record(r.knot_positions.clone(), r.n_ascans, r.density_per_mm)?;
            let mut values = Array2::zeros((r.n_bscans, layout.len()));
            if r.values.len() != r.n_bscans {
                return Err(SplineError::ControlCountMismatch {
                    expected: r.n_bscans,
                    found: r.values.len(),
                });
            }
            for (i, row) in r.values.iter().enumerate() {
                if row.len() != layout.len() {
                    return Err(SplineError::ControlCountMismatch {
                        expected: layout.len(),
                        found: row.len(),
                    });
                }
                for (n, &v) in row.iter().enumerate() {
                    values[[i, n]] = v;
                }
            }
            fields.push(CorrectionField { layout, values });
        }
        Ok(CorrectionSet::new(fields))
    }
}

pub fn write_corrections(path: &Path, set: &CorrectionSet) -> Result<(), IoError> {
    write_json(path, &CorrectionsFile::from_set(set))
}

pub fn read_corrections(path: &Path) -> Result<CorrectionSet, IoError> {
    let file: CorrectionsFile = read_json(path)?;
    file.to_set().map_err(|e| invalid(path, e))
}

/// Contents of `truth.json`: the generating spec and the log illumination
/// of both scans, one row per B-scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub spec: PhantomSpec,
    pub log_illumination_x_fast: Vec<Vec<f64>>,
    pub log_illumination_y_fast: Vec<Vec<f64>>,
    pub bands_x_fast: Vec<(usize, usize)>,
    pub bands_y_fast: Vec<(usize, usize)>,
}

impl TruthFile {
    pub fn from_truth(truth: &PhantomTruth) -> Self {
        let rows = |a: &Array2<f64>| a.outer_iter().map(|r| r.to_vec()).collect();
        TruthFile {
            spec: truth.spec.clone(),
            log_illumination_x_fast: rows(&truth.log_illumination[0]),
            log_illumination_y_fast: rows(&truth.log_illumination[1]),
            bands_x_fast: truth.bands[0].clone(),
            bands_y_fast: truth.bands[1].clone(),
        }
    }

    /// Log illumination arrays, x-fast first.
    pub fn log_illumination(&self) -> Result<[Array2<f64>; 2], String> {
        Ok([
            rows_to_array(&self.log_illumination_x_fast)?,
            rows_to_array(&self.log_illumination_y_fast)?,
        ])
    }
}

fn rows_to_array(rows: &[Vec<f64>]) -> Result<Array2<f64>, String> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err("ragged rows".into());
    }
    Array2::from_shape_vec((n, m), rows.concat()).map_err(|e| e.to_string())
}

pub fn write_truth(path: &Path, truth: &PhantomTruth) -> Result<(), IoError> {
    write_json(path, &TruthFile::from_truth(truth))
}

pub fn read_truth(path: &Path) -> Result<TruthFile, IoError> {
    let file: TruthFile = read_json(path)?;
    file.log_illumination().map_err(|e| invalid(path, e))?;
    Ok(file)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub termination: String,
    pub iterations: usize,
    pub best_iteration: usize,
    pub best_total: f64,
    pub initial_total: f64,
    pub final_total: f64,
    pub learning_rate: f64,
    pub parameter_count: usize,
    pub residual_count: usize,
}

impl TraceSummary {
    pub fn from_trace(trace: &OptimizationTrace) -> Self {
        let first = trace.records.first();
        let last = trace.records.last();
        TraceSummary {
            termination: format!("{:?}", trace.termination),
            iterations: last.map_or(0, |r| r.iteration),
            best_iteration: trace.best_iteration,
            best_total: trace.best_total,
            initial_total: first.map_or(f64::NAN, |r| r.total),
            final_total: last.map_or(f64::NAN, |r| r.total),
            learning_rate: trace.learning_rate,
            parameter_count: trace.parameter_count,
            residual_count: trace.residual_count,
        }
    }
}

/// Line-delimited trace: a header, then every `log_every`-th iteration and
/// the last one.
pub fn format_trace_log(trace: &OptimizationTrace, log_every: usize) -> String {
    let mut out = String::from("iteration\ttotal\tdata\tregularizer\tgradient_norm\tstep_norm\tconstraint\n");
    let last = trace.records.len().saturating_sub(1);
    for (n, r) in trace.records.iter().enumerate() {
        let keep = n == last || (log_every > 0 && r.iteration % log_every == 0);
        if keep {
            out.push_str(&format!(
                "{}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}\n",
                r.iteration, r.total, r.data, r.regularizer, r.gradient_norm, r.step_norm, r.constraint
            ));
        }
    }
    out
}

pub fn write_trace(dir: &Path, trace: &OptimizationTrace, log_every: usize) -> Result<(), IoError> {
    write_file(&dir.join("trace.log"), format_trace_log(trace, log_every).as_bytes())?;
    write_json(&dir.join("summary.json"), &TraceSummary::from_trace(trace))
}

/// Binary 16-bit PGM, samples scaled to `[0, 65535]` by the largest covered
/// value; uncovered pixels are 0. Rows are B-scans.
pub fn encode_pgm(image: &EnfaceImage) -> Vec<u8> {
    let (h, w) = image.dims();
    let max = image.max_covered();
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for (&v, &c) in image.values.iter().zip(&image.covered) {
        let s = if c && max > 0.0 {
            (v / max * 65535.0).round().clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        out.extend_from_slice(&s.to_be_bytes());
    }
    out
}

/// Decimal values, one line per B-scan; uncovered pixels are left empty.
pub fn encode_csv(image: &EnfaceImage) -> String {
    let mut out = String::new();
    for (row, cov) in image.values.outer_iter().zip(image.covered.outer_iter()) {
        let cells: Vec<String> = row
            .iter()
            .zip(cov.iter())
            .map(|(v, &c)| if c { v.to_string() } else { String::new() })
            .collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Writes PGM or CSV depending on the extension of `path`.
pub fn write_enface(path: &Path, image: &EnfaceImage) -> Result<(), IoError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => write_file(path, &encode_pgm(image)),
        Some("csv") => write_file(path, encode_csv(image).as_bytes()),
        _ => Err(invalid(path, "output must end in .pgm or .csv")),
    }
}

/// Writes any serializable value as pretty JSON.
pub fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    write_json(path, value)
}
