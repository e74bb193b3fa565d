//! Per-B-scan cubic Hermite splines of correction coefficients.
//!
//! Tangents follow the Catmull-Rom rule: centred differences of the
//! neighbouring knot values, one-sided at the first and last knot. The spline
//! is linear in its control values, so every evaluation is a sparse dot
//! product with at most four basis weights.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SplineError {
    #[error("degenerate scan: {0}")]
    DegenerateScan(String),
    #[error("position {pos} outside the knot range [{lo}, {hi}]")]
    OutOfDomain { pos: f64, lo: f64, hi: f64 },
    #[error("expected {expected} control values, got {found}")]
    ControlCountMismatch { expected: usize, found: usize },
}

/// Ascending knot positions in A-scan index units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotLayout {
    positions: Vec<f64>,
    density_per_mm: f64,
    n_ascans: usize,
}

impl KnotLayout {
    /// Uniform, endpoint-inclusive knots over `[0, n_ascans - 1]` at
    /// roughly `density_per_mm` knots per millimetre of scan length.
    pub fn build(
        n_ascans: usize,
        transverse_spacing_mm: f64,
        density_per_mm: f64,
    ) -> Result<Self, SplineError> {
        if n_ascans < 2 {
            return Err(SplineError::DegenerateScan(format!(
                "need at least 2 A-scans, got {n_ascans}"
            )));
        }
        if !(density_per_mm > 0.0 && density_per_mm.is_finite()) {
            return Err(SplineError::DegenerateScan(format!(
                "knot density must be positive, got {density_per_mm}"
            )));
        }
        if !(transverse_spacing_mm > 0.0 && transverse_spacing_mm.is_finite()) {
            return Err(SplineError::DegenerateScan(format!(
                "A-scan spacing must be positive, got {transverse_spacing_mm}"
            )));
        }
        let length_mm = (n_ascans - 1) as f64 * transverse_spacing_mm;
        let count = ((length_mm * density_per_mm).round() as usize + 1).max(2);
        let last = (n_ascans - 1) as f64;
        let step = last / (count - 1) as f64;
        let mut positions: Vec<f64> = (0..count).map(|n| n as f64 * step).collect();
        positions[count - 1] = last;
        Ok(KnotLayout {
            positions,
            density_per_mm,
            n_ascans,
        })
    }

    /// Arbitrary ascending knots; they need not coincide with the sample range.
    pub fn from_positions(
        positions: Vec<f64>,
        n_ascans: usize,
        transverse_spacing_mm: f64,
    ) -> Result<Self, SplineError> {
        if positions.len() < 2 {
            return Err(SplineError::DegenerateScan("need at least 2 knots".into()));
        }
        if positions.windows(2).any(|w| w[1] <= w[0]) || positions.iter().any(|p| !p.is_finite())
        {
            return Err(SplineError::DegenerateScan(
                "knot positions must be finite and strictly ascending".into(),
            ));
        }
        let span = positions[positions.len() - 1] - positions[0];
        Ok(KnotLayout {
            density_per_mm: (positions.len() - 1) as f64 / (span * transverse_spacing_mm),
            positions,
            n_ascans,
        })
    }

    /// Restores a layout from stored positions and density.
    pub fn from_record(
        positions: Vec<f64>,
        n_ascans: usize,
        density_per_mm: f64,
    ) -> Result<Self, SplineError> {
        let mut layout = Self::from_positions(positions, n_ascans, 1.0)?;
        layout.density_per_mm = density_per_mm;
        Ok(layout)
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn density_per_mm(&self) -> f64 {
        self.density_per_mm
    }

    pub fn n_ascans(&self) -> usize {
        self.n_ascans
    }

    fn domain(&self) -> (f64, f64) {
        (self.positions[0], self.positions[self.positions.len() - 1])
    }

    /// Basis weights of the spline at position `x`.
    pub fn basis_weights(&self, x: f64) -> Result<SplineWeights, SplineError> {
        let (lo, hi) = self.domain();
        if !(x >= lo && x <= hi) {
            return Err(SplineError::OutOfDomain { pos: x, lo, hi });
        }
        let p = &self.positions;
        let last = p.len() - 1;
        // segment n covers [p[n], p[n + 1]]
        let n = match p.partition_point(|&q| q <= x) {
            0 => 0,
            idx => (idx - 1).min(last - 1),
        };
        let h = p[n + 1] - p[n];
        let t = (x - p[n]) / h;
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;

        // slots cover knots n-1 ..= n+2
        let mut w = [0.0f64; 4];
        w[1] += h00;
        w[2] += h01;
        let mut add_tangent = |knot: usize, scale: f64| {
            let (a, b) = if knot == 0 {
                (0, 1)
            } else if knot == last {
                (last - 1, last)
            } else {
                (knot - 1, knot + 1)
            };
            let d = p[b] - p[a];
            // slot of knot q is q + 1 - n
            w[b + 1 - n] += scale / d;
            w[a + 1 - n] -= scale / d;
        };
        add_tangent(n, h10 * h);
        add_tangent(n + 1, h11 * h);

        let first = n as isize - 1;
        let (skip, first) = if first < 0 { (1, 0) } else { (0, first as usize) };
        let mut weights = [0.0; 4];
        let mut len = 0;
        for (slot, &v) in w.iter().enumerate().skip(skip) {
            if first + (slot - skip) > last {
                break;
            }
            weights[slot - skip] = v;
            len += 1;
        }
        Ok(SplineWeights {
            first,
            len,
            weights,
        })
    }

    /// Spline value at `x` for the given control values.
    pub fn eval(&self, controls: &[f64], x: f64) -> Result<f64, SplineError> {
        if controls.len() != self.len() {
            return Err(SplineError::ControlCountMismatch {
                expected: self.len(),
                found: controls.len(),
            });
        }
        Ok(self.basis_weights(x)?.dot(controls))
    }

    /// Weights at every integer A-scan index `0..n_ascans`.
    pub fn table(&self) -> Result<Vec<SplineWeights>, SplineError> {
        (0..self.n_ascans)
            .map(|j| self.basis_weights(j as f64))
            .collect()
    }
}

/// Sparse basis weights over consecutive knots `first .. first + len`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplineWeights {
    first: usize,
    len: usize,
    weights: [f64; 4],
}

impl SplineWeights {
    #[inline]
    pub fn dot(&self, controls: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (w, c) in self.weights[..self.len]
            .iter()
            .zip(&controls[self.first..self.first + self.len])
        {
            acc += w * c;
        }
        acc
    }

    /// Adds `scale * w_n` into `out[n]` for every supported knot `n`.
    #[inline]
    pub fn scatter(&self, scale: f64, out: &mut [f64]) {
        for (w, o) in self.weights[..self.len]
            .iter()
            .zip(&mut out[self.first..self.first + self.len])
        {
            *o += scale * w;
        }
    }

    /// `(knot index, weight)` pairs.
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.weights[..self.len]
            .iter()
            .enumerate()
            .map(move |(s, &w)| (self.first + s, w))
    }

    /// Dense weight vector over `n_knots` knots.
    pub fn to_dense(&self, n_knots: usize) -> Vec<f64> {
        let mut v = vec![0.0; n_knots];
        self.scatter(1.0, &mut v);
        v
    }
}

/// Control values `c_i(knot)` of one volume: one row per B-scan.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionField {
    pub layout: KnotLayout,
    pub values: Array2<f64>,
}

impl CorrectionField {
    pub fn zeros(n_bscans: usize, layout: KnotLayout) -> Self {
        let values = Array2::zeros((n_bscans, layout.len()));
        CorrectionField { layout, values }
    }

    pub fn n_bscans(&self) -> usize {
        self.values.nrows()
    }

    /// Spline values at every A-scan, shape `(n_bscans, n_ascans)`.
    pub fn ascan_values(&self) -> Array2<f64> {
        let table = self.layout.table().expect("integer A-scan positions lie in the knot range");
        self.ascan_values_with(&table)
    }

    pub(crate) fn ascan_values_with(&self, table: &[SplineWeights]) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_bscans(), table.len()));
        for (i, row) in self.values.outer_iter().enumerate() {
            let row = row.as_slice().expect("standard layout");
            for (j, w) in table.iter().enumerate() {
                out[[i, j]] = w.dot(row);
            }
        }
        out
    }

    pub fn value_at(&self, i: usize, j: f64) -> Result<f64, SplineError> {
        let row = self.values.row(i);
        self.layout.eval(row.as_slice().expect("standard layout"), j)
    }
}

/// Control values of every volume of a problem, in volume order.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionSet {
    pub fields: Vec<CorrectionField>,
}

impl CorrectionSet {
    pub fn new(fields: Vec<CorrectionField>) -> Self {
        CorrectionSet { fields }
    }

    /// Total number of control values.
    pub fn len(&self) -> usize {
        self.fields.iter().map(|f| f.values.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zeros_like(&self) -> Self {
        CorrectionSet {
            fields: self
                .fields
                .iter()
                .map(|f| CorrectionField::zeros(f.n_bscans(), f.layout.clone()))
                .collect(),
        }
    }

    /// All control values, volume by volume, row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        self.fields
            .iter()
            .flat_map(|f| f.values.iter().copied())
            .collect()
    }

    /// Overwrites the control values from a flat vector in [`Self::to_flat`] order.
    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.len(), "flat parameter length");
        let mut offset = 0;
        for f in &mut self.fields {
            let n = f.values.len();
            for (dst, src) in f.values.iter_mut().zip(&flat[offset..offset + n]) {
                *dst = *src;
            }
            offset += n;
        }
    }

    pub fn with_flat(&self, flat: &[f64]) -> Self {
        let mut out = self.clone();
        out.set_flat(flat);
        out
    }
}
