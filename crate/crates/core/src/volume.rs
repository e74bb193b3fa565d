//! Raster-scanned volumes, scan directions and registration mappings.
//!
//! Volumes are indexed `(i, j, k)`: B-scan, A-scan within the B-scan, depth.
//! Depth is the fastest axis in memory so that every A-scan is contiguous.

use ndarray::{Array2, Array3, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum VolumeError {
    #[error("dimension mismatch: expected {expected:?}, got {found:?}")]
    DimensionMismatch {
        expected: [usize; 3],
        found: [usize; 3],
    },
    #[error("non-finite or negative intensity at voxel ({0}, {1}, {2})")]
    NonFiniteData(usize, usize, usize),
    #[error("spacing must be positive, got {0}")]
    NonPositiveSpacing(f64),
    #[error("validity varies along depth in A-scan ({0}, {1}); gaps must cover whole A-scans")]
    PartialAscanGap(usize, usize),
    #[error("index ({0}, {1}, {2}) is outside the source volume")]
    IndexOutOfBounds(usize, usize, usize),
    #[error("volume must have at least one voxel along every axis")]
    Empty,
}

/// Fast-axis orientation of a raster scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScanDirection {
    #[serde(rename = "x-fast")]
    XFast,
    #[serde(rename = "y-fast")]
    YFast,
}

impl ScanDirection {
    pub fn is_orthogonal_to(self, other: ScanDirection) -> bool {
        self != other
    }

    pub fn orthogonal(self) -> ScanDirection {
        match self {
            ScanDirection::XFast => ScanDirection::YFast,
            ScanDirection::YFast => ScanDirection::XFast,
        }
    }

    /// 0 for x-fast, 1 for y-fast.
    pub fn index(self) -> usize {
        match self {
            ScanDirection::XFast => 0,
            ScanDirection::YFast => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScanDirection::XFast => "x-fast",
            ScanDirection::YFast => "y-fast",
        }
    }
}

impl std::str::FromStr for ScanDirection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "x-fast" => Ok(ScanDirection::XFast),
            "y-fast" => Ok(ScanDirection::YFast),
            other => Err(format!("unknown scan direction '{other}'")),
        }
    }
}

/// Physical sampling of a volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    /// Distance between neighbouring A-scans, in millimetres.
    pub transverse_mm: f64,
    /// Distance between neighbouring depth samples, in micrometres.
    pub axial_um: f64,
}

impl Spacing {
    pub fn new(transverse_mm: f64, axial_um: f64) -> Self {
        Spacing {
            transverse_mm,
            axial_um,
        }
    }
}

/// A linear-scale OCT volume with per-A-scan validity.
///
/// Intensities are finite and non-negative. Validity is stored per A-scan
/// since an A-scan is acquired atomically; a voxel-level validity array is
/// accepted on construction and checked for consistency along depth.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterVolume {
    data: Array3<f64>,
    direction: ScanDirection,
    spacing: Spacing,
    valid: Array2<bool>,
}

impl RasterVolume {
    pub fn new(
        data: Array3<f64>,
        direction: ScanDirection,
        spacing: Spacing,
        validity: Array3<bool>,
    ) -> Result<Self, VolumeError> {
        let dims = dims_of(&data);
        let vdims = dims_of(&validity);
        if dims != vdims {
            return Err(VolumeError::DimensionMismatch {
                expected: dims,
                found: vdims,
            });
        }
        let mut valid = Array2::from_elem((dims[0], dims[1]), true);
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                let column = validity.slice(ndarray::s![i, j, ..]);
                let first = column[0];
                if column.iter().any(|&v| v != first) {
                    return Err(VolumeError::PartialAscanGap(i, j));
                }
                valid[[i, j]] = first;
            }
        }
        Self::from_ascan_validity(data, direction, spacing, valid)
    }

    /// Builds a volume from a per-A-scan validity map of shape `(n_bscans, n_ascans)`.
    pub fn from_ascan_validity(
        data: Array3<f64>,
        direction: ScanDirection,
        spacing: Spacing,
        valid: Array2<bool>,
    ) -> Result<Self, VolumeError> {
        let dims = dims_of(&data);
        if dims.contains(&0) {
            return Err(VolumeError::Empty);
        }
        if valid.dim() != (dims[0], dims[1]) {
            return Err(VolumeError::DimensionMismatch {
                expected: dims,
                found: [valid.dim().0, valid.dim().1, dims[2]],
            });
        }
        for s in [spacing.transverse_mm, spacing.axial_um] {
            if !(s > 0.0 && s.is_finite()) {
                return Err(VolumeError::NonPositiveSpacing(s));
            }
        }
        if let Some(((i, j, k), _)) = data
            .indexed_iter()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return Err(VolumeError::NonFiniteData(i, j, k));
        }
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().into_owned()
        };
        Ok(RasterVolume {
            data,
            direction,
            spacing,
            valid,
        })
    }

    /// A volume with every A-scan valid.
    pub fn fully_valid(
        data: Array3<f64>,
        direction: ScanDirection,
        spacing: Spacing,
    ) -> Result<Self, VolumeError> {
        let (n_b, n_a, _) = data.dim();
        Self::from_ascan_validity(data, direction, spacing, Array2::from_elem((n_b, n_a), true))
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn direction(&self) -> ScanDirection {
        self.direction
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    /// `[n_bscans, n_ascans, n_depth]`
    pub fn dims(&self) -> [usize; 3] {
        dims_of(&self.data)
    }

    pub fn n_bscans(&self) -> usize {
        self.data.dim().0
    }

    pub fn n_ascans(&self) -> usize {
        self.data.dim().1
    }

    pub fn n_depth(&self) -> usize {
        self.data.dim().2
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[[i, j, k]]
    }

    pub fn ascan(&self, i: usize, j: usize) -> ArrayView1<'_, f64> {
        self.data.slice(ndarray::s![i, j, ..])
    }

    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        self.valid[[i, j]]
    }

    /// Per-A-scan validity, shape `(n_bscans, n_ascans)`.
    pub fn ascan_validity(&self) -> &Array2<bool> {
        &self.valid
    }

    /// Per-voxel validity, expanded along depth.
    pub fn validity(&self) -> Array3<bool> {
        let [n_b, n_a, n_d] = self.dims();
        Array3::from_shape_fn((n_b, n_a, n_d), |(i, j, _)| self.valid[[i, j]])
    }

    pub fn max_intensity(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    /// Same geometry and validity, new intensities.
    pub fn with_data(&self, data: Array3<f64>) -> Result<Self, VolumeError> {
        Self::from_ascan_validity(data, self.direction, self.spacing, self.valid.clone())
    }

    pub fn is_orthogonal_to(&self, other: &RasterVolume) -> bool {
        self.direction.is_orthogonal_to(other.direction)
    }

    /// Physical length of one B-scan from the first to the last A-scan.
    pub fn bscan_length_mm(&self) -> f64 {
        (self.n_ascans() as f64 - 1.0) * self.spacing.transverse_mm
    }
}

/// Log-scale companion of a [`RasterVolume`].
#[derive(Debug, Clone, PartialEq)]
pub struct LogVolume {
    data: Array3<f64>,
    valid: Array2<bool>,
    epsilon: f64,
}

impl LogVolume {
    pub(crate) fn from_parts(data: Array3<f64>, valid: Array2<bool>, epsilon: f64) -> Self {
        LogVolume {
            data,
            valid,
            epsilon,
        }
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn dims(&self) -> [usize; 3] {
        dims_of(&self.data)
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[[i, j, k]]
    }

    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        self.valid[[i, j]]
    }

    pub fn ascan_validity(&self) -> &Array2<bool> {
        &self.valid
    }

    /// Intensity floor used when taking the logarithm.
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

/// Where the voxels of a source volume land in the index frame of a target volume.
#[derive(Debug, Clone, PartialEq)]
pub enum RegisteredGeometry {
    /// `(i, j, k) -> (i, j, k)`
    Identity,
    /// `(i, j, k) -> (j, i, k)`: the orthogonal scan of the same grid, stored in
    /// its own acquisition order.
    Transposed,
    /// One stored target coordinate per source voxel.
    Dense(DenseMapping),
}

/// Per-voxel target coordinates for a source volume of shape `dims`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMapping {
    dims: [usize; 3],
    coords: Vec<[f64; 3]>,
}

impl DenseMapping {
    pub fn new(dims: [usize; 3], coords: Vec<[f64; 3]>) -> Result<Self, VolumeError> {
        let n = dims.iter().product::<usize>();
        if coords.len() != n {
            return Err(VolumeError::DimensionMismatch {
                expected: dims,
                found: [coords.len(), 1, 1],
            });
        }
        Ok(DenseMapping { dims, coords })
    }

    /// Builds the mapping by evaluating `f` at every source voxel.
    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> [f64; 3]) -> Self {
        let mut coords = Vec::with_capacity(dims.iter().product());
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    coords.push(f(i, j, k));
                }
            }
        }
        DenseMapping { dims, coords }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    fn at(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        self.coords[(i * self.dims[1] + j) * self.dims[2] + k]
    }
}

impl RegisteredGeometry {
    /// Default mapping between two volumes sampled on a common grid, each
    /// stored in its own scan order.
    pub fn between(source: ScanDirection, target: ScanDirection) -> Self {
        if source == target {
            RegisteredGeometry::Identity
        } else {
            RegisteredGeometry::Transposed
        }
    }

    /// Target-frame coordinate of source voxel `(i, j, k)`.
    ///
    /// `source_dims` bounds the index; dense mappings carry their own bounds.
    pub fn map_coordinate(
        &self,
        source_dims: [usize; 3],
        i: usize,
        j: usize,
        k: usize,
    ) -> Result<[f64; 3], VolumeError> {
        let dims = match self {
            RegisteredGeometry::Dense(m) => m.dims,
            _ => source_dims,
        };
        if i >= dims[0] || j >= dims[1] || k >= dims[2] {
            return Err(VolumeError::IndexOutOfBounds(i, j, k));
        }
        Ok(self.map_unchecked(i, j, k))
    }

    #[inline]
    pub(crate) fn map_unchecked(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        match self {
            RegisteredGeometry::Identity => [i as f64, j as f64, k as f64],
            RegisteredGeometry::Transposed => [j as f64, i as f64, k as f64],
            RegisteredGeometry::Dense(m) => m.at(i, j, k),
        }
    }

    /// Dims this geometry expects of its source volume, when it constrains them.
    pub fn source_dims(&self) -> Option<[usize; 3]> {
        match self {
            RegisteredGeometry::Dense(m) => Some(m.dims),
            _ => None,
        }
    }
}

pub(crate) fn dims_of<T>(a: &Array3<T>) -> [usize; 3] {
    let (a0, a1, a2) = a.dim();
    [a0, a1, a2]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spacing() -> Spacing {
        Spacing::new(0.012, 1.78)
    }

    #[test]
    fn full_scale_volume_is_valid() {
        // 500 x 500 A-scans over 6 mm, 775 depth samples at 1.78 um
        let data = Array3::<f64>::zeros((500, 500, 775));
        let validity = Array3::from_elem((500, 500, 775), true);
        let v = RasterVolume::new(data, ScanDirection::XFast, spacing(), validity).unwrap();
        assert_eq!(v.dims(), [500, 500, 775]);
        assert!((v.bscan_length_mm() - 5.988).abs() < 1e-12);
    }

    #[test]
    fn validity_dims_must_match() {
        let data = Array3::<f64>::zeros((2, 3, 4));
        let validity = Array3::from_elem((2, 3, 5), true);
        let err = RasterVolume::new(data, ScanDirection::XFast, spacing(), validity).unwrap_err();
        assert!(matches!(err, VolumeError::DimensionMismatch { .. }));
    }

    #[test]
    fn rejects_nan_and_negative() {
        let mut data = Array3::<f64>::zeros((2, 2, 2));
        data[[1, 0, 1]] = f64::NAN;
        let validity = Array3::from_elem((2, 2, 2), true);
        let err = RasterVolume::new(data.clone(), ScanDirection::XFast, spacing(), validity.clone())
            .unwrap_err();
        assert_eq!(err, VolumeError::NonFiniteData(1, 0, 1));
        data[[1, 0, 1]] = -1.0;
        assert!(RasterVolume::new(data, ScanDirection::XFast, spacing(), validity).is_err());
    }

    #[test]
    fn rejects_bad_spacing() {
        let data = Array3::<f64>::zeros((2, 2, 2));
        let err =
            RasterVolume::fully_valid(data, ScanDirection::YFast, Spacing::new(0.0, 1.0)).unwrap_err();
        assert_eq!(err, VolumeError::NonPositiveSpacing(0.0));
    }

    #[test]
    fn gaps_must_cover_whole_ascans() {
        let data = Array3::<f64>::zeros((2, 2, 3));
        let mut validity = Array3::from_elem((2, 2, 3), true);
        validity[[0, 1, 2]] = false;
        let err = RasterVolume::new(data.clone(), ScanDirection::XFast, spacing(), validity.clone())
            .unwrap_err();
        assert_eq!(err, VolumeError::PartialAscanGap(0, 1));
        validity[[0, 1, 0]] = false;
        validity[[0, 1, 1]] = false;
        let v = RasterVolume::new(data, ScanDirection::XFast, spacing(), validity.clone()).unwrap();
        assert!(!v.is_valid(0, 1));
        assert_eq!(v.validity(), validity);
    }

    #[test]
    fn bscan_length() {
        let mk = |n: usize, dx: f64| {
            RasterVolume::fully_valid(
                Array3::zeros((1, n, 1)),
                ScanDirection::XFast,
                Spacing::new(dx, 1.0),
            )
            .unwrap()
            .bscan_length_mm()
        };
        assert!((mk(500, 0.012) - 499.0 * 0.012).abs() < 1e-12);
        assert_eq!(mk(2, 1.0), 1.0);
        assert!((mk(101, 0.01) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn coordinate_mapping() {
        let dims = [8, 8, 8];
        let id = RegisteredGeometry::Identity;
        assert_eq!(id.map_coordinate(dims, 3, 4, 5).unwrap(), [3.0, 4.0, 5.0]);
        let t = RegisteredGeometry::Transposed;
        assert_eq!(t.map_coordinate(dims, 3, 4, 5).unwrap(), [4.0, 3.0, 5.0]);
        let dense = DenseMapping::from_fn(dims, |i, j, k| {
            if (i, j, k) == (3, 4, 5) {
                [3.5, 4.0, 5.0]
            } else {
                [i as f64, j as f64, k as f64]
            }
        });
        let d = RegisteredGeometry::Dense(dense);
        assert_eq!(d.map_coordinate(dims, 3, 4, 5).unwrap(), [3.5, 4.0, 5.0]);
        assert_eq!(
            id.map_coordinate(dims, 8, 0, 0),
            Err(VolumeError::IndexOutOfBounds(8, 0, 0))
        );
        assert!(d.map_coordinate([100, 100, 100], 0, 9, 0).is_err());
    }

    #[test]
    fn orthogonality_is_symmetric() {
        use ScanDirection::*;
        for a in [XFast, YFast] {
            for b in [XFast, YFast] {
                assert_eq!(a.is_orthogonal_to(b), b.is_orthogonal_to(a));
            }
        }
        assert!(XFast.is_orthogonal_to(YFast));
        assert!(!XFast.is_orthogonal_to(XFast));
    }

    #[test]
    fn voxel_round_trip_is_exact() {
        let data = Array3::from_shape_fn((3, 4, 5), |(i, j, k)| (i * 100 + j * 10 + k) as f64 * 0.1);
        let v = RasterVolume::fully_valid(data.clone(), ScanDirection::XFast, spacing()).unwrap();
        for ((i, j, k), x) in data.indexed_iter() {
            assert_eq!(v.get(i, j, k).to_bits(), x.to_bits());
        }
    }
}
