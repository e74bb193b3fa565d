//! Applying fitted illumination fields, merging volumes and en-face maps.

use ndarray::{Array2, Array3};
use thiserror::Error;

use crate::preprocess::ForegroundMask;
use crate::resample::{sample_with, SampleResult};
use crate::spline::CorrectionField;
use crate::volume::{RasterVolume, RegisteredGeometry, VolumeError};

#[derive(Debug, Error)]
pub enum CorrectionError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no volumes to merge")]
    NoVolumes,
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Multiplies every foreground voxel by `exp(c_i(j))`. Background voxels and
/// invalid A-scans are copied unchanged.
pub fn apply_correction(
    volume: &RasterVolume,
    mask: &ForegroundMask,
    field: &CorrectionField,
) -> Result<RasterVolume, CorrectionError> {
    let dims = volume.dims();
    if mask.dims() != dims {
        return Err(CorrectionError::ShapeMismatch(format!(
            "mask {:?} for volume {:?}",
            mask.dims(),
            dims
        )));
    }
    if field.n_bscans() != dims[0] || field.layout.n_ascans() != dims[1] {
        return Err(CorrectionError::ShapeMismatch(format!(
            "field covers {} x {} A-scans, volume has {} x {}",
            field.n_bscans(),
            field.layout.n_ascans(),
            dims[0],
            dims[1]
        )));
    }
    let gains = field.ascan_values().mapv(f64::exp);
    let m = mask.mask();
    let mut data = volume.data().clone();
    for ((i, j, k), v) in data.indexed_iter_mut() {
        if m[[i, j, k]] {
            *v *= gains[[i, j]];
        }
    }
    Ok(volume.with_data(data)?)
}

/// Resamples `source` onto a grid of shape `dims`, where `geometry` maps grid
/// voxels into `source` indices. Samples outside `source` or touching one of
/// its gaps are dropped; an A-scan of the result is valid only if all of its
/// depth samples were obtained.
pub fn resample_onto(
    source: &RasterVolume,
    geometry: &RegisteredGeometry,
    dims: [usize; 3],
    template: &RasterVolume,
) -> Result<RasterVolume, CorrectionError> {
    let samples = sample_grid(source, geometry, dims)?;
    let mut data = Array3::zeros(dims);
    let mut valid = Array2::from_elem((dims[0], dims[1]), true);
    for ((i, j, k), s) in samples.indexed_iter() {
        match s {
            Some(v) => data[[i, j, k]] = *v,
            None => valid[[i, j]] = false,
        }
    }
    zero_invalid(&mut data, &valid);
    Ok(RasterVolume::from_ascan_validity(
        data,
        template.direction(),
        template.spacing(),
        valid,
    )?)
}

/// Merges co-registered volumes onto the grid of the first one.
///
/// `geometries[n]` maps reference voxels into volume `n + 1`; `None` uses
/// [`RegisteredGeometry::between`] for the two scan directions. Each voxel is
/// the mean over the volumes that cover it. A-scans where some depth has no
/// contributor are marked invalid and zeroed.
pub fn merge_volumes(
    volumes: &[RasterVolume],
    geometries: Option<&[RegisteredGeometry]>,
) -> Result<RasterVolume, CorrectionError> {
    let reference = volumes.first().ok_or(CorrectionError::NoVolumes)?;
    let dims = reference.dims();
    let mut sum = Array3::<f64>::zeros(dims);
    let mut count = Array3::<u32>::zeros(dims);
    for (i, j) in valid_ascans(reference) {
        for k in 0..dims[2] {
            sum[[i, j, k]] += reference.get(i, j, k);
            count[[i, j, k]] += 1;
        }
    }
    for (n, other) in volumes.iter().enumerate().skip(1) {
        let geometry = match geometries {
            Some(g) => g.get(n - 1).cloned().ok_or_else(|| {
                CorrectionError::ShapeMismatch(format!("no geometry for volume {n}"))
            })?,
            None => RegisteredGeometry::between(reference.direction(), other.direction()),
        };
        let samples = sample_grid(other, &geometry, dims)?;
        for (idx, s) in samples.indexed_iter() {
            if let Some(v) = s {
                sum[idx] += v;
                count[idx] += 1;
            }
        }
    }
    let mut valid = Array2::from_elem((dims[0], dims[1]), true);
    for ((i, j, _), &c) in count.indexed_iter() {
        if c == 0 {
            valid[[i, j]] = false;
        }
    }
    let mut data = Array3::zeros(dims);
    for ((idx, s), &c) in sum.indexed_iter().zip(count.iter()) {
        if c > 0 {
            data[idx] = s / c as f64;
        }
    }
    zero_invalid(&mut data, &valid);
    Ok(RasterVolume::from_ascan_validity(
        data,
        reference.direction(),
        reference.spacing(),
        valid,
    )?)
}

/// Depth-averaged image with a coverage map, indexed `(i, j)` like the
/// volume it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct EnfaceImage {
    pub values: Array2<f64>,
    pub covered: Array2<bool>,
}

impl EnfaceImage {
    pub fn dims(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Largest value over covered pixels, 0 when nothing is covered.
    pub fn max_covered(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.covered)
            .filter(|(_, &c)| c)
            .fold(0.0, |m, (&v, _)| m.max(v))
    }

    pub fn covered_count(&self) -> usize {
        self.covered.iter().filter(|&&c| c).count()
    }
}

/// Mean intensity over depth at every valid A-scan. With `overlap`, a pixel
/// is covered only where both volumes hold a valid A-scan (`overlap` must
/// share the grid of `volume`).
pub fn enface(
    volume: &RasterVolume,
    overlap: Option<&RasterVolume>,
) -> Result<EnfaceImage, CorrectionError> {
    let [n_b, n_a, n_d] = volume.dims();
    if let Some(o) = overlap {
        if o.n_bscans() != n_b || o.n_ascans() != n_a {
            return Err(CorrectionError::ShapeMismatch(format!(
                "overlap volume {:?} does not share the grid {:?}",
                o.dims(),
                volume.dims()
            )));
        }
    }
    let mut values = Array2::zeros((n_b, n_a));
    let mut covered = Array2::from_elem((n_b, n_a), false);
    for (i, j) in valid_ascans(volume) {
        if overlap.is_some_and(|o| !o.is_valid(i, j)) {
            continue;
        }
        if n_d > 0 {
            values[[i, j]] = volume.ascan(i, j).sum() / n_d as f64;
        }
        covered[[i, j]] = true;
    }
    Ok(EnfaceImage { values, covered })
}

fn valid_ascans(volume: &RasterVolume) -> impl Iterator<Item = (usize, usize)> + '_ {
    volume
        .ascan_validity()
        .indexed_iter()
        .filter(|(_, &v)| v)
        .map(|(idx, _)| idx)
}

fn sample_grid(
    source: &RasterVolume,
    geometry: &RegisteredGeometry,
    dims: [usize; 3],
) -> Result<Array3<Option<f64>>, CorrectionError> {
    if let Some(d) = geometry.source_dims() {
        if d != dims {
            return Err(CorrectionError::ShapeMismatch(format!(
                "geometry covers {d:?}, grid is {dims:?}"
            )));
        }
    }
    let src_dims = source.dims();
    let data = source.data();
    let valid = source.ascan_validity();
    Ok(Array3::from_shape_fn(dims, |(i, j, k)| {
        let coord = geometry.map_unchecked(i, j, k);
        match sample_with(src_dims, valid, coord, |a, b, c| data[[a, b, c]]) {
            SampleResult::Value(v) => Some(v),
            SampleResult::Excluded(_) => None,
        }
    }))
}

fn zero_invalid(data: &mut Array3<f64>, valid: &Array2<bool>) {
    for ((i, j, _), v) in data.indexed_iter_mut() {
        if !valid[[i, j]] {
            *v = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spline::KnotLayout;
    use crate::volume::{ScanDirection, Spacing};

    fn vol(data: Array3<f64>, dir: ScanDirection) -> RasterVolume {
        RasterVolume::fully_valid(data, dir, Spacing::new(0.1, 2.0)).unwrap()
    }

    fn constant_field(n_b: usize, n_a: usize, c: f64) -> CorrectionField {
        let layout = KnotLayout::build(n_a, 0.1, 5.0).unwrap();
        let mut f = CorrectionField::zeros(n_b, layout);
        f.values.fill(c);
        f
    }

    #[test]
    fn applies_gain_to_foreground_only() {
        let v = vol(Array3::from_elem((2, 3, 2), 2.0), ScanDirection::XFast);
        let mut m = Array3::from_elem((2, 3, 2), false);
        m[[0, 0, 0]] = true;
        let mask = ForegroundMask::from_array(&v, m, 0.0);
        let out = apply_correction(&v, &mask, &constant_field(2, 3, 0.5)).unwrap();
        assert!((out.get(0, 0, 0) - 2.0 * 0.5f64.exp()).abs() < 1e-12);
        assert_eq!(out.get(0, 0, 1).to_bits(), 2.0f64.to_bits());
        assert_eq!(out.get(1, 2, 1).to_bits(), 2.0f64.to_bits());
    }

    #[test]
    fn zero_field_is_identity() {
        let data = Array3::from_shape_fn((3, 4, 5), |(i, j, k)| 0.1 + (i * 20 + j * 5 + k) as f64 / 7.0);
        let v = vol(data, ScanDirection::YFast);
        let mask = ForegroundMask::from_array(&v, Array3::from_elem((3, 4, 5), true), 0.0);
        let out = apply_correction(&v, &mask, &constant_field(3, 4, 0.0)).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn merge_of_consistent_pair_reproduces_reference() {
        let x = Array3::from_shape_fn((4, 5, 3), |(i, j, k)| 1.0 + (i + 2 * j + 3 * k) as f64);
        let y = x.clone().permuted_axes([1, 0, 2]).as_standard_layout().into_owned();
        let merged = merge_volumes(
            &[vol(x.clone(), ScanDirection::XFast), vol(y, ScanDirection::YFast)],
            None,
        )
        .unwrap();
        assert_eq!(merged.data(), &x);
        assert!(merged.ascan_validity().iter().all(|&v| v));
    }

    #[test]
    fn merge_fills_gaps_from_partner() {
        let x = Array3::from_elem((3, 3, 2), 1.0);
        let mut valid = Array2::from_elem((3, 3), true);
        valid[[1, 2]] = false;
        let xv = RasterVolume::from_ascan_validity(
            x,
            ScanDirection::XFast,
            Spacing::new(0.1, 2.0),
            valid,
        )
        .unwrap();
        let yv = vol(Array3::from_elem((3, 3, 2), 3.0), ScanDirection::YFast);
        let merged = merge_volumes(&[xv, yv], None).unwrap();
        assert_eq!(merged.get(1, 2, 0), 3.0);
        assert_eq!(merged.get(0, 0, 0), 2.0);
    }

    #[test]
    fn merge_without_contributor_is_invalid() {
        let mut va = Array2::from_elem((2, 2), true);
        va[[0, 1]] = false;
        let mut vb = Array2::from_elem((2, 2), true);
        vb[[1, 0]] = false;
        let sp = Spacing::new(0.1, 2.0);
        let a = RasterVolume::from_ascan_validity(Array3::from_elem((2, 2, 1), 1.0), ScanDirection::XFast, sp, va)
            .unwrap();
        let b = RasterVolume::from_ascan_validity(Array3::from_elem((2, 2, 1), 1.0), ScanDirection::YFast, sp, vb)
            .unwrap();
        let merged = merge_volumes(&[a, b], None).unwrap();
        assert!(!merged.is_valid(0, 1));
        assert!(merged.is_valid(1, 0));
    }

    #[test]
    fn enface_mean_and_coverage() {
        let data = Array3::from_shape_fn((2, 2, 4), |(_, j, k)| (j * 4 + k) as f64);
        let mut valid = Array2::from_elem((2, 2), true);
        valid[[1, 1]] = false;
        let v = RasterVolume::from_ascan_validity(data, ScanDirection::XFast, Spacing::new(0.1, 2.0), valid)
            .unwrap();
        let e = enface(&v, None).unwrap();
        assert_eq!(e.values[[0, 0]], 1.5);
        assert_eq!(e.values[[0, 1]], 5.5);
        assert!(!e.covered[[1, 1]]);
        assert_eq!(e.covered_count(), 3);

        let mut ov = Array2::from_elem((2, 2), true);
        ov[[0, 0]] = false;
        let o = RasterVolume::from_ascan_validity(
            Array3::zeros((2, 2, 1)),
            ScanDirection::YFast,
            Spacing::new(0.1, 2.0),
            ov,
        )
        .unwrap();
        let e = enface(&v, Some(&o)).unwrap();
        assert_eq!(e.covered_count(), 2);
    }

    #[test]
    fn resample_transposes() {
        let y = Array3::from_shape_fn((3, 4, 2), |(i, j, k)| (i * 100 + j * 10 + k) as f64);
        let yv = vol(y.clone(), ScanDirection::YFast);
        let template = vol(Array3::zeros((4, 3, 2)), ScanDirection::XFast);
        let r = resample_onto(&yv, &RegisteredGeometry::Transposed, [4, 3, 2], &template).unwrap();
        assert_eq!(r.get(2, 1, 1), y[[1, 2, 1]]);
        assert_eq!(r.direction(), ScanDirection::XFast);
    }
}
