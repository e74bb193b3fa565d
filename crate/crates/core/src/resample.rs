//! Separable Catmull-Rom interpolation on voxel grids with gap exclusion.

use ndarray::{Array2, Array3};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ResampleError {
    #[error("coordinate {0:?} lies outside the target grid")]
    OutOfBounds([f64; 3]),
}

/// Why a sample was dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exclusion {
    OutOfBounds,
    GapInSupport,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleResult {
    Value(f64),
    Excluded(Exclusion),
}

impl SampleResult {
    pub fn value(self) -> Option<f64> {
        match self {
            SampleResult::Value(v) => Some(v),
            SampleResult::Excluded(_) => None,
        }
    }

    pub fn excluded_reason(self) -> Option<Exclusion> {
        match self {
            SampleResult::Value(_) => None,
            SampleResult::Excluded(r) => Some(r),
        }
    }
}

/// 1D Catmull-Rom weights along one axis, border indices clamped and merged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisWeights {
    idx: [usize; 4],
    w: [f64; 4],
    len: usize,
}

impl AxisWeights {
    /// `None` when `u` is outside `[0, n - 1]`.
    pub fn new(u: f64, n: usize) -> Option<Self> {
        if n == 0 || !(u >= 0.0 && u <= (n - 1) as f64) {
            return None;
        }
        let p = (u.floor() as usize).min(n - 1);
        let t = u - p as f64;
        let mut out = AxisWeights {
            idx: [0; 4],
            w: [0.0; 4],
            len: 0,
        };
        if t == 0.0 {
            out.push(p, 1.0);
            return Some(out);
        }
        let t2 = t * t;
        let t3 = t2 * t;
        let kernel = [
            0.5 * (-t3 + 2.0 * t2 - t),
            0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
            0.5 * (-3.0 * t3 + 4.0 * t2 + t),
            0.5 * (t3 - t2),
        ];
        let last = (n - 1) as isize;
        for (s, &w) in kernel.iter().enumerate() {
            let q = (p as isize - 1 + s as isize).clamp(0, last) as usize;
            out.push(q, w);
        }
        Some(out)
    }

    fn push(&mut self, q: usize, w: f64) {
        if let Some(slot) = self.idx[..self.len].iter().position(|&x| x == q) {
            self.w[slot] += w;
        } else {
            self.idx[self.len] = q;
            self.w[self.len] = w;
            self.len += 1;
        }
    }

    /// `(index, weight)` pairs with nonzero weight.
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.idx[..self.len]
            .iter()
            .copied()
            .zip(self.w[..self.len].iter().copied())
            .filter(|&(_, w)| w != 0.0)
    }
}

/// Separable 3D interpolation stencil over at most 64 voxels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    axes: [AxisWeights; 3],
}

impl Stencil {
    pub fn new(coord: [f64; 3], dims: [usize; 3]) -> Option<Self> {
        Some(Stencil {
            axes: [
                AxisWeights::new(coord[0], dims[0])?,
                AxisWeights::new(coord[1], dims[1])?,
                AxisWeights::new(coord[2], dims[2])?,
            ],
        })
    }

    /// `(i, j, k, weight)` for every support voxel with nonzero weight.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, usize, f64)> + '_ {
        let [a, b, c] = &self.axes;
        a.iter().flat_map(move |(i, wi)| {
            b.iter().flat_map(move |(j, wj)| {
                c.iter().map(move |(k, wk)| (i, j, k, wi * wj * wk))
            })
        })
    }

    /// `(i, j, weight)` over the transverse support, i.e. the A-scans touched.
    pub fn ascans(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let [a, b, _] = &self.axes;
        a.iter()
            .flat_map(move |(i, wi)| b.iter().map(move |(j, wj)| (i, j, wi * wj)))
    }

    /// True when every A-scan carrying nonzero weight is valid.
    pub fn support_is_valid(&self, valid: &Array2<bool>) -> bool {
        self.ascans().all(|(i, j, w)| w == 0.0 || valid[[i, j]])
    }
}

/// Sparse interpolation weights at `coord` on a grid of shape `dims`.
pub fn interpolation_weights(coord: [f64; 3], dims: [usize; 3]) -> Result<Stencil, ResampleError> {
    Stencil::new(coord, dims).ok_or(ResampleError::OutOfBounds(coord))
}

/// Interpolates `data` at `coord`, excluding samples whose support touches an
/// invalid A-scan.
pub fn interpolate(data: &Array3<f64>, valid: &Array2<bool>, coord: [f64; 3]) -> SampleResult {
    sample_with(data_dims(data), valid, coord, |i, j, k| data[[i, j, k]])
}

/// Like [`interpolate`], reading voxel values through `value`.
pub fn sample_with(
    dims: [usize; 3],
    valid: &Array2<bool>,
    coord: [f64; 3],
    value: impl Fn(usize, usize, usize) -> f64,
) -> SampleResult {
    let Some(stencil) = Stencil::new(coord, dims) else {
        return SampleResult::Excluded(Exclusion::OutOfBounds);
    };
    if !stencil.support_is_valid(valid) {
        return SampleResult::Excluded(Exclusion::GapInSupport);
    }
    SampleResult::Value(stencil.iter().map(|(i, j, k, w)| w * value(i, j, k)).sum())
}

fn data_dims(data: &Array3<f64>) -> [usize; 3] {
    let (a, b, c) = data.dim();
    [a, b, c]
}
