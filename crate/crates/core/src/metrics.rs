//! Correction quality: en-face agreement between orthogonal scans and, for
//! phantoms, recovery of the known illumination.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correction::{enface, resample_onto, CorrectionError, EnfaceImage};
use crate::preprocess::{preprocess, ForegroundMask, PreprocessConfig, PreprocessError};
use crate::volume::{RasterVolume, RegisteredGeometry};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("the images share no covered pixel")]
    EmptyOverlap,
    #[error("no ground truth available")]
    MissingTruth,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Correction(#[from] CorrectionError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub mad_before: f64,
    pub mad_after: f64,
    pub reduction_percent: f64,
    pub decreased: bool,
    pub illum_rmse_before: Option<f64>,
    pub illum_rmse_after: Option<f64>,
}

impl EvaluationReport {
    pub fn from_mads(mad_before: f64, mad_after: f64) -> Self {
        EvaluationReport {
            mad_before,
            mad_after,
            reduction_percent: reduction_percent(mad_before, mad_after),
            decreased: mad_after < mad_before,
            illum_rmse_before: None,
            illum_rmse_after: None,
        }
    }
}

/// `100 * (1 - after / before)`, or 0 when `before` is 0.
pub fn reduction_percent(before: f64, after: f64) -> f64 {
    if before > 0.0 {
        100.0 * (1.0 - after / before)
    } else {
        0.0
    }
}

/// Mean `|e1 - e2|` over pixels covered in both images.
pub fn mad_between_enfaces(e1: &EnfaceImage, e2: &EnfaceImage) -> Result<f64, MetricsError> {
    if e1.dims() != e2.dims() {
        return Err(MetricsError::ShapeMismatch(format!(
            "en-face images {:?} and {:?}",
            e1.dims(),
            e2.dims()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((a, b), (&ca, &cb)) in e1
        .values
        .iter()
        .zip(&e2.values)
        .zip(e1.covered.iter().zip(&e2.covered))
    {
        if ca && cb {
            sum += (a - b).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(MetricsError::EmptyOverlap);
    }
    Ok(sum / n as f64)
}

/// RMS difference between per-A-scan corrections and the negated true log
/// illumination over foreground A-scans of all volumes, after removing the
/// mean difference (the global constant is not identifiable).
///
/// `corrections`, `truth` and `foreground` hold one `(n_bscans, n_ascans)`
/// array per volume.
pub fn illumination_recovery_error(
    corrections: &[Array2<f64>],
    truth: Option<&[&Array2<f64>]>,
    foreground: &[Array2<bool>],
) -> Result<f64, MetricsError> {
    let truth = truth.ok_or(MetricsError::MissingTruth)?;
    if truth.len() != corrections.len() || foreground.len() != corrections.len() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} corrections, {} truth arrays, {} masks",
            corrections.len(),
            truth.len(),
            foreground.len()
        )));
    }
    let mut diffs = Vec::new();
    for ((c, t), m) in corrections.iter().zip(truth).zip(foreground) {
        if c.dim() != t.dim() || c.dim() != m.dim() {
            return Err(MetricsError::ShapeMismatch(format!(
                "correction {:?}, truth {:?}, mask {:?}",
                c.dim(),
                t.dim(),
                m.dim()
            )));
        }
        for ((&cv, &tv), &mv) in c.iter().zip(t.iter()).zip(m.iter()) {
            if mv {
                diffs.push(cv + tv);
            }
        }
    }
    if diffs.is_empty() {
        return Err(MetricsError::EmptyOverlap);
    }
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let ms = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / diffs.len() as f64;
    Ok(ms.sqrt())
}

/// A-scans holding at least one foreground voxel.
pub fn foreground_ascans(mask: &ForegroundMask) -> Array2<bool> {
    let [n_b, n_a, _] = mask.dims();
    Array2::from_shape_fn((n_b, n_a), |(i, j)| mask.ascan_has_foreground(i, j))
}

/// Per-A-scan log gain `mean(ln(after / before))` over the foreground voxels
/// of each A-scan; 0 where there are none.
pub fn inferred_correction(
    before: &RasterVolume,
    after: &RasterVolume,
    mask: &ForegroundMask,
) -> Result<Array2<f64>, MetricsError> {
    if before.dims() != after.dims() || mask.dims() != before.dims() {
        return Err(MetricsError::ShapeMismatch(format!(
            "before {:?}, after {:?}, mask {:?}",
            before.dims(),
            after.dims(),
            mask.dims()
        )));
    }
    let [n_b, n_a, n_d] = before.dims();
    let mut out = Array2::zeros((n_b, n_a));
    for i in 0..n_b {
        for j in 0..n_a {
            let mut sum = 0.0;
            let mut n = 0usize;
            for k in 0..n_d {
                let (b, a) = (before.get(i, j, k), after.get(i, j, k));
                if mask.get(i, j, k) && b > 0.0 && a > 0.0 {
                    sum += (a / b).ln();
                    n += 1;
                }
            }
            if n > 0 {
                out[[i, j]] = sum / n as f64;
            }
        }
    }
    Ok(out)
}

/// Overlap-restricted en-face images of two orthogonal volumes on the grid
/// of the first.
pub fn paired_enfaces(
    first: &RasterVolume,
    second: &RasterVolume,
) -> Result<(EnfaceImage, EnfaceImage), MetricsError> {
    let geometry = RegisteredGeometry::between(first.direction(), second.direction());
    let moved = resample_onto(second, &geometry, first.dims(), first)?;
    Ok((enface(first, Some(&moved))?, enface(&moved, Some(first))?))
}

/// MAD before and after correction, and recovery errors when the true log
/// illumination of the x-fast and y-fast scan is given. Corrections are
/// inferred from the intensity ratio on the foreground of `before`.
pub fn evaluate_pair(
    before: &[RasterVolume],
    after: &[RasterVolume],
    truth: Option<&[Array2<f64>; 2]>,
) -> Result<EvaluationReport, MetricsError> {
    if before.len() != 2 || after.len() != 2 {
        return Err(MetricsError::ShapeMismatch(format!(
            "need two volumes before and after, got {} and {}",
            before.len(),
            after.len()
        )));
    }
    let (b1, b2) = paired_enfaces(&before[0], &before[1])?;
    let (a1, a2) = paired_enfaces(&after[0], &after[1])?;
    let mut report =
        EvaluationReport::from_mads(mad_between_enfaces(&b1, &b2)?, mad_between_enfaces(&a1, &a2)?);
    if let Some(truth) = truth {
        let cfg = PreprocessConfig::default();
        let mut corrections = Vec::new();
        let mut zeros = Vec::new();
        let mut fg = Vec::new();
        let mut truths = Vec::new();
        for (b, a) in before.iter().zip(after) {
            let (_, mask) = preprocess(b, &cfg)?;
            let t = &truth[b.direction().index()];
            if t.dim() != (b.n_bscans(), b.n_ascans()) {
                return Err(MetricsError::ShapeMismatch(format!(
                    "truth {:?} for volume {:?}",
                    t.dim(),
                    b.dims()
                )));
            }
            corrections.push(inferred_correction(b, a, &mask)?);
            zeros.push(Array2::zeros(t.dim()));
            fg.push(foreground_ascans(&mask));
            truths.push(t);
        }
        report.illum_rmse_before = Some(illumination_recovery_error(&zeros, Some(&truths), &fg)?);
        report.illum_rmse_after =
            Some(illumination_recovery_error(&corrections, Some(&truths), &fg)?);
    }
    Ok(report)
}
