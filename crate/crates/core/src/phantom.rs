//! Synthetic orthogonal scan pairs with known illumination.
//!
//! The backscatter volume `t*` lives on a shared `(n_x, n_y, n_depth)` grid
//! stored in x-fast order, i.e. indexed `[y][x][k]`. An x-fast scan has one
//! B-scan per `y` and samples `t*` directly; a y-fast scan has one B-scan per
//! `x` and samples the transposed grid. Each scan is
//! `t = a_i(j) * t* + n` with a per-B-scan log illumination `log a_i(j)`.
//!
//! Illumination is only identifiable up to a field that is spline-smooth in
//! both transverse directions: multiplying `t*` by such a field and dividing
//! both scans' illumination by it leaves the scans unchanged. The generator
//! therefore removes that common part from the curves it produces (measured
//! on the model knot layout), so the stored truth is the one the regularised
//! fit aims for.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spline::{KnotLayout, SplineError};
use crate::volume::{RasterVolume, ScanDirection, Spacing, VolumeError};

const STREAM_BACKSCATTER: u64 = 1;
const STREAM_ILLUMINATION: u64 = 10;
const STREAM_NOISE: u64 = 20;
const STREAM_ARTIFACTS: u64 = 30;

/// Intensity factor inside vessels.
const VESSEL_FACTOR: f64 = 0.5;
/// Intensity factor inside the dark disk.
const DISK_FACTOR: f64 = 0.3;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Spline(#[from] SplineError),
}

/// Circular region of reduced backscatter, in grid pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DarkDisk {
    pub center_x: f64,
    pub center_y: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// `(n_x, n_y, n_depth)`
    pub grid: [usize; 3],
    pub transverse_spacing_mm: f64,
    pub axial_spacing_um: f64,
    pub layer_count: usize,
    pub vessel_count: usize,
    pub dark_disk: Option<DarkDisk>,
    /// Maximum `|log a|` over both scans.
    pub illum_amplitude: f64,
    pub jump_probability: f64,
    pub band_count: usize,
    pub gap_count: usize,
    pub blink_rows: usize,
    /// Standard deviation of the additive noise, linear scale.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Draw within-B-scan curves on the model knot layout instead of the
    /// denser, offset generator layout.
    pub spline_representable: bool,
    /// Knot density of the correction model the truth is expressed for.
    pub model_density_per_mm: f64,
    pub generator_density_per_mm: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            grid: [128, 128, 64],
            transverse_spacing_mm: 6.0 / 128.0,
            axial_spacing_um: 1.78,
            layer_count: 5,
            vessel_count: 4,
            dark_disk: None,
            illum_amplitude: 0.4,
            jump_probability: 0.3,
            band_count: 2,
            gap_count: 2,
            blink_rows: 0,
            noise_sigma: 0.01,
            seed: 0,
            spline_representable: false,
            model_density_per_mm: 1.0,
            generator_density_per_mm: 2.0,
        }
    }
}

impl PhantomSpec {
    /// Default spec on a `n_x x n_y x n_depth` grid spanning 6 mm along x.
    pub fn with_grid(n_x: usize, n_y: usize, n_depth: usize) -> Self {
        PhantomSpec {
            grid: [n_x, n_y, n_depth],
            transverse_spacing_mm: 6.0 / n_x as f64,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::InvalidSpec(m));
        if self.grid.iter().any(|&d| d < 8) {
            return bad(format!("every grid dimension must be >= 8, got {:?}", self.grid));
        }
        if !(self.illum_amplitude >= 0.0 && self.illum_amplitude.is_finite()) {
            return bad(format!("illum_amplitude must be >= 0, got {}", self.illum_amplitude));
        }
        if !(0.0..=1.0).contains(&self.jump_probability) {
            return bad(format!(
                "jump_probability must lie in [0, 1], got {}",
                self.jump_probability
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        for (name, v) in [
            ("transverse_spacing_mm", self.transverse_spacing_mm),
            ("axial_spacing_um", self.axial_spacing_um),
            ("model_density_per_mm", self.model_density_per_mm),
            ("generator_density_per_mm", self.generator_density_per_mm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        let [n_x, n_y, _] = self.grid;
        if self.blink_rows > n_x.min(n_y) / 2 {
            return bad(format!(
                "blink_rows {} exceeds half the smaller transverse size",
                self.blink_rows
            ));
        }
        Ok(())
    }

    pub fn spacing(&self) -> Spacing {
        Spacing::new(self.transverse_spacing_mm, self.axial_spacing_um)
    }

    /// Depth rows above the tissue that never carry signal.
    pub fn signal_free_rows(&self) -> usize {
        let depth = self.grid[2];
        if depth >= 32 {
            20
        } else {
            depth / 2
        }
    }

    /// `(n_bscans, n_ascans)` of a scan in `direction`.
    pub fn scan_shape(&self, direction: ScanDirection) -> (usize, usize) {
        let [n_x, n_y, _] = self.grid;
        match direction {
            ScanDirection::XFast => (n_y, n_x),
            ScanDirection::YFast => (n_x, n_y),
        }
    }

    /// Volume dims `[n_bscans, n_ascans, n_depth]` of a scan in `direction`.
    pub fn scan_dims(&self, direction: ScanDirection) -> [usize; 3] {
        let (b, a) = self.scan_shape(direction);
        [b, a, self.grid[2]]
    }

    /// Correction-model knot layout along the fast axis of `direction`.
    pub fn model_layout(&self, direction: ScanDirection) -> Result<KnotLayout, SplineError> {
        let (_, n_a) = self.scan_shape(direction);
        KnotLayout::build(n_a, self.transverse_spacing_mm, self.model_density_per_mm)
    }

    fn generator_layout(&self, n_a: usize) -> Result<KnotLayout, SplineError> {
        if self.spline_representable {
            return KnotLayout::build(n_a, self.transverse_spacing_mm, self.model_density_per_mm);
        }
        let step = 1.0 / (self.generator_density_per_mm * self.transverse_spacing_mm);
        let last = (n_a - 1) as f64;
        let mut positions = vec![-0.5 * step];
        while *positions.last().expect("non-empty") < last {
            let next = positions[positions.len() - 1] + step;
            positions.push(next);
        }
        KnotLayout::from_positions(positions, n_a, self.transverse_spacing_mm)
    }
}

/// Log illumination of one scan, `(n_bscans, n_ascans)`, with the B-scan
/// ranges that received a shared banding offset.
#[derive(Debug, Clone, PartialEq)]
pub struct IlluminationField {
    pub log: Array2<f64>,
    pub bands: Vec<(usize, usize)>,
}

/// Rectangular run of missing A-scans: B-scans `rows.0..rows.1`, A-scans
/// `cols.0..cols.1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gap {
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

/// Placement of blink rows and gaps in one scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanArtifacts {
    pub blink: Option<(usize, usize)>,
    pub gaps: Vec<Gap>,
}

impl ScanArtifacts {
    pub fn validity(&self, n_bscans: usize, n_ascans: usize) -> Array2<bool> {
        let mut valid = Array2::from_elem((n_bscans, n_ascans), true);
        if let Some((lo, hi)) = self.blink {
            valid.slice_mut(ndarray::s![lo..hi, ..]).fill(false);
        }
        for g in &self.gaps {
            valid
                .slice_mut(ndarray::s![g.rows.0..g.rows.1, g.cols.0..g.cols.1])
                .fill(false);
        }
        valid
    }

    pub fn is_blink_row(&self, i: usize) -> bool {
        self.blink.is_some_and(|(lo, hi)| (lo..hi).contains(&i))
    }
}

/// Ground truth of a phantom pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomTruth {
    pub spec: PhantomSpec,
    /// `t*` in x-fast order `[y][x][k]`.
    pub backscatter: Array3<f64>,
    /// Log illumination of the x-fast and the y-fast scan.
    pub log_illumination: [Array2<f64>; 2],
    /// Banding ranges of the x-fast and the y-fast scan.
    pub bands: [Vec<(usize, usize)>; 2],
    /// `t* > 0`, x-fast order.
    pub foreground: Array3<bool>,
}

impl PhantomTruth {
    pub fn log_illumination(&self, direction: ScanDirection) -> &Array2<f64> {
        &self.log_illumination[direction.index()]
    }

    pub fn bands(&self, direction: ScanDirection) -> &[(usize, usize)] {
        &self.bands[direction.index()]
    }
}

/// Two orthogonal scans (x-fast first) and their ground truth.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub volumes: [RasterVolume; 2],
    pub truth: PhantomTruth,
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Layered tissue slab below a signal-free band, with vessels and an
/// optional dark disk. Values lie in `[0, 1]`, indexed `[y][x][k]`.
pub fn generate_backscatter(spec: &PhantomSpec) -> Result<Array3<f64>, PhantomError> {
    spec.validate()?;
    let [n_x, n_y, depth] = spec.grid;
    let mut r = rng(spec.seed, STREAM_BACKSCATTER);
    let tau = std::f64::consts::TAU;

    let top = spec.signal_free_rows();
    let base = (top + (depth / 32).max(1)) as f64;
    let undulation = (depth as f64 * 0.05).min((depth - top) as f64 * 0.25);
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (r.random_range(0.5..1.5), r.random_range(0.0..tau), r.random_range(0.0..1.0)))
        .collect();
    let surface_f = |x: usize, y: usize| {
        let u = x as f64 / n_x as f64;
        let v = y as f64 / n_y as f64;
        let w = 0.5 * (tau * waves[0].0 * u + waves[0].1).sin()
            + 0.3 * (tau * waves[1].0 * v + waves[1].1).sin()
            + 0.2 * (tau * waves[2].0 * 0.5 * (u + v) + waves[2].1).sin();
        base + undulation * (1.0 + w)
    };
    let mut surface = Array2::from_shape_fn((n_y, n_x), |(y, x)| {
        (surface_f(x, y).round() as usize).clamp(top, depth - 1)
    });
    regularize_surface(&mut surface);

    let layers: Vec<f64> = (0..spec.layer_count)
        .map(|_| r.random_range(0.45..1.0))
        .collect();
    let layer_waves: Vec<(f64, f64, f64)> = (0..spec.layer_count)
        .map(|_| (r.random_range(0.5..2.0), r.random_range(0.0..tau), r.random_range(0.0..tau)))
        .collect();

    struct Vessel {
        px: f64,
        py: f64,
        dir: (f64, f64),
        radius: f64,
        axial_radius: f64,
        depth_offset: f64,
    }
    let scale = n_x.min(n_y) as f64 / 128.0;
    let vessels: Vec<Vessel> = (0..spec.vessel_count)
        .map(|_| {
            let theta: f64 = r.random_range(0.0..std::f64::consts::PI);
            let radius = (1.5 + r.random_range(0.0..2.0)) * scale.max(0.25);
            Vessel {
                px: r.random_range(0.0..n_x as f64),
                py: r.random_range(0.0..n_y as f64),
                dir: (theta.cos(), theta.sin()),
                radius,
                axial_radius: radius.max(1.5),
                depth_offset: r.random_range(0.15..0.4) * (depth - top) as f64,
            }
        })
        .collect();

    let tissue_span = (depth as f64 - base - undulation).max(1.0);
    let mut out = Array3::zeros((n_y, n_x, depth));
    for y in 0..n_y {
        for x in 0..n_x {
            let z = surface[[y, x]];
            let zf = surface_f(x, y);
            let mut lateral = 1.0f64;
            if let Some(d) = &spec.dark_disk {
                let (dx, dy) = (x as f64 - d.center_x, y as f64 - d.center_y);
                if dx * dx + dy * dy <= d.radius * d.radius {
                    lateral = DISK_FACTOR;
                }
            }
            for k in z..depth {
                let mut value = if layers.is_empty() {
                    0.8
                } else {
                    let rel = (k as f64 - zf) / tissue_span;
                    let mut idx = 0;
                    for (l, &(f, p1, p2)) in layer_waves.iter().enumerate().skip(1) {
                        let boundary = l as f64 / layers.len() as f64
                            + 0.03
                                * ((tau * f * x as f64 / n_x as f64 + p1).sin()
                                    + (tau * f * y as f64 / n_y as f64 + p2).sin());
                        if rel >= boundary {
                            idx = l;
                        }
                    }
                    layers[idx]
                };
                let mut factor = lateral;
                for v in &vessels {
                    let (qx, qy) = (x as f64 - v.px, y as f64 - v.py);
                    let across = -qx * v.dir.1 + qy * v.dir.0;
                    let dz = k as f64 - (zf + v.depth_offset);
                    let e = (across / v.radius).powi(2) + (dz / v.axial_radius).powi(2);
                    if e <= 1.0 {
                        factor = factor.min(VESSEL_FACTOR);
                    }
                }
                value *= factor;
                out[[y, x, k]] = value;
            }
        }
    }
    Ok(out)
}

/// Removes one-pixel-wide extrema from the rounded tissue surface along both
/// transverse axes and copies the border rows inwards. Either kind of
/// feature would make a per-B-scan median filter see the surface
/// differently in the two scan directions.
fn regularize_surface(z: &mut Array2<usize>) {
    let (n_y, n_x) = z.dim();
    for _ in 0..16 {
        let mut changed = false;
        for y in 0..n_y {
            for x in 1..n_x - 1 {
                let (a, b) = (z[[y, x - 1]], z[[y, x + 1]]);
                if a == b && z[[y, x]] != a {
                    z[[y, x]] = a;
                    changed = true;
                }
            }
        }
        for x in 0..n_x {
            for y in 1..n_y - 1 {
                let (a, b) = (z[[y - 1, x]], z[[y + 1, x]]);
                if a == b && z[[y, x]] != a {
                    z[[y, x]] = a;
                    changed = true;
                }
            }
        }
        for y in 0..n_y {
            for (dst, src) in [(0, 1), (n_x - 1, n_x - 2)] {
                if z[[y, dst]] != z[[y, src]] {
                    z[[y, dst]] = z[[y, src]];
                    changed = true;
                }
            }
        }
        for x in 0..n_x {
            for (dst, src) in [(0, 1), (n_y - 1, n_y - 2)] {
                if z[[dst, x]] != z[[src, x]] {
                    z[[dst, x]] = z[[src, x]];
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
}

/// Raw per-B-scan log illumination of the scan in `direction`, scaled so its
/// largest magnitude equals `illum_amplitude`.
///
/// Each curve is an offset plus a smooth spline in `j`. Offsets drift slowly
/// between B-scans, jump with probability `jump_probability`, and
/// `band_count` runs of B-scans share an extra offset.
pub fn generate_illumination(
    spec: &PhantomSpec,
    direction: ScanDirection,
) -> Result<IlluminationField, PhantomError> {
    spec.validate()?;
    let (n_b, n_a) = spec.scan_shape(direction);
    if spec.illum_amplitude == 0.0 {
        return Ok(IlluminationField {
            log: Array2::zeros((n_b, n_a)),
            bands: Vec::new(),
        });
    }
    let mut r = rng(spec.seed, STREAM_ILLUMINATION + direction.index() as u64);
    let tau = std::f64::consts::TAU;
    let layout = spec.generator_layout(n_a)?;
    let knots = layout.positions().to_vec();
    let table = layout.table()?;

    let drift = (r.random_range(0.5..1.5), r.random_range(0.0..tau));
    let components: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                r.random_range(0.2..0.5),
                r.random_range(0.3..1.2),
                r.random_range(0.0..tau),
                r.random_range(-1.0..1.0),
            )
        })
        .collect();
    let jitter = Normal::new(0.0, 0.03).expect("valid normal");

    let mut bands = Vec::new();
    let mut band_offset = vec![0.0; n_b];
    let max_len = (n_b / 5).max(1);
    let min_len = (n_b / 10).max(1);
    for _ in 0..spec.band_count {
        for _attempt in 0..100 {
            let len = r.random_range(min_len..=max_len);
            if len + 2 > n_b {
                break;
            }
            let start = r.random_range(1..=n_b - len - 1);
            let clear = bands
                .iter()
                .all(|&(lo, hi): &(usize, usize)| start + len + 1 < lo || start > hi + 1);
            if clear {
                let sign = if r.random_bool(0.5) { 1.0 } else { -1.0 };
                let offset = sign * r.random_range(0.6..1.0);
                band_offset[start..start + len].fill(offset);
                bands.push((start, start + len));
                break;
            }
        }
    }
    bands.sort_unstable();

    let mut log = Array2::zeros((n_b, n_a));
    let mut jump_level = 0.0;
    let mut values = vec![0.0; knots.len()];
    let span = (n_a - 1) as f64;
    for i in 0..n_b {
        let phase = i as f64 / n_b as f64;
        if i > 0 && r.random_bool(spec.jump_probability) {
            let sign = if r.random_bool(0.5) { 1.0 } else { -1.0 };
            jump_level += sign * r.random_range(0.4..0.8);
        }
        jump_level *= 0.9;
        let offset = 0.3 * (tau * drift.0 * phase + drift.1).sin() + jump_level + band_offset[i];
        for (v, &x) in values.iter_mut().zip(&knots) {
            let u = x / span;
            *v = components
                .iter()
                .map(|&(a, f, p, w)| a * (tau * f * u + p + tau * w * phase).sin())
                .sum::<f64>()
                + jitter.sample(&mut r);
        }
        for (j, w) in table.iter().enumerate() {
            log[[i, j]] = offset + w.dot(&values);
        }
    }
    let peak = log.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        log.mapv_inplace(|v| v * spec.illum_amplitude / peak);
    }
    Ok(IlluminationField { log, bands })
}

/// Deterministic placement of blink rows and gaps for one scan.
pub fn scan_artifacts(spec: &PhantomSpec, direction: ScanDirection) -> ScanArtifacts {
    let (n_b, n_a) = spec.scan_shape(direction);
    let mut r = rng(spec.seed, STREAM_ARTIFACTS + direction.index() as u64);
    let blink = (spec.blink_rows > 0).then(|| {
        let start = r.random_range(0..=n_b - spec.blink_rows);
        (start, start + spec.blink_rows)
    });
    let gaps = (0..spec.gap_count)
        .map(|_| {
            let rows = r.random_range(1..=4usize.min(n_b));
            let cols = r.random_range(4usize.min(n_a / 2)..=12usize.min(n_a / 2));
            let i0 = r.random_range(0..=n_b - rows);
            let j0 = r.random_range(0..=n_a - cols);
            Gap {
                rows: (i0, i0 + rows),
                cols: (j0, j0 + cols),
            }
        })
        .collect();
    ScanArtifacts { blink, gaps }
}

/// Removes from both scans' curves the component both could share: the least
/// squares fit, in model control values, of a tensor-product spline field.
/// Rows in `excluded` (per scan) do not take part in the fit.
pub fn remove_common_field(
    spec: &PhantomSpec,
    curves: [&Array2<f64>; 2],
    excluded: [&dyn Fn(usize) -> bool; 2],
) -> Result<[Array2<f64>; 2], PhantomError> {
    let lx = spec.model_layout(ScanDirection::XFast)?;
    let ly = spec.model_layout(ScanDirection::YFast)?;
    let bx = dense_basis(&lx)?;
    let by = dense_basis(&ly)?;
    let (kx, ky) = (lx.len(), ly.len());
    let [n_x, n_y, _] = spec.grid;
    if curves[0].dim() != (n_y, n_x) || curves[1].dim() != (n_x, n_y) {
        return Err(PhantomError::GridMismatch(format!(
            "curves {:?} and {:?} for grid {:?}",
            curves[0].dim(),
            curves[1].dim(),
            spec.grid
        )));
    }
    let cx = fit_rows(curves[0], &bx);
    let cy = fit_rows(curves[1], &by);

    let n = kx * ky;
    let idx = |a: usize, b: usize| a * ky + b;
    let mut normal = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    for y in (0..n_y).filter(|&y| !excluded[0](y)) {
        for a in 0..kx {
            for m in 0..ky {
                rhs[idx(a, m)] += by[(y, m)] * cx[(y, a)];
                for m2 in 0..ky {
                    normal[(idx(a, m), idx(a, m2))] += by[(y, m)] * by[(y, m2)];
                }
            }
        }
    }
    for x in (0..n_x).filter(|&x| !excluded[1](x)) {
        for m in 0..ky {
            for a in 0..kx {
                rhs[idx(a, m)] += bx[(x, a)] * cy[(x, m)];
                for a2 in 0..kx {
                    normal[(idx(a, m), idx(a2, m))] += bx[(x, a)] * bx[(x, a2)];
                }
            }
        }
    }
    let coef = normal
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|e| PhantomError::InvalidSpec(format!("common field fit failed: {e}")))?;
    let coef = DMatrix::from_row_slice(kx, ky, coef.as_slice());
    // g[x][y] = sum_ab coef[a][b] bx[x][a] by[y][b]
    let g = &bx * coef * by.transpose();
    let x_out = Array2::from_shape_fn((n_y, n_x), |(y, x)| curves[0][[y, x]] - g[(x, y)]);
    let y_out = Array2::from_shape_fn((n_x, n_y), |(x, y)| curves[1][[x, y]] - g[(x, y)]);
    Ok([x_out, y_out])
}

fn dense_basis(layout: &KnotLayout) -> Result<DMatrix<f64>, SplineError> {
    let table = layout.table()?;
    let mut b = DMatrix::zeros(table.len(), layout.len());
    for (j, w) in table.iter().enumerate() {
        for (n, v) in w.iter() {
            b[(j, n)] = v;
        }
    }
    Ok(b)
}

/// Least-squares control values of every row of `curves` on basis `b`.
fn fit_rows(curves: &Array2<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let pinv = b
        .clone()
        .pseudo_inverse(1e-12)
        .expect("pseudo-inverse of a finite basis");
    let (rows, cols) = curves.dim();
    let c = DMatrix::from_fn(rows, cols, |i, j| curves[[i, j]]);
    c * pinv.transpose()
}

/// Backscatter, canonical illumination of both scans and foreground.
pub fn generate_truth(spec: &PhantomSpec) -> Result<PhantomTruth, PhantomError> {
    spec.validate()?;
    let backscatter = generate_backscatter(spec)?;
    let raw_x = generate_illumination(spec, ScanDirection::XFast)?;
    let raw_y = generate_illumination(spec, ScanDirection::YFast)?;
    let art_x = scan_artifacts(spec, ScanDirection::XFast);
    let art_y = scan_artifacts(spec, ScanDirection::YFast);
    let [mut lx, mut ly] = remove_common_field(
        spec,
        [&raw_x.log, &raw_y.log],
        [&|i: usize| art_x.is_blink_row(i), &|i: usize| art_y.is_blink_row(i)],
    )?;
    let peak = lx.iter().chain(ly.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let s = spec.illum_amplitude / peak;
        lx.mapv_inplace(|v| v * s);
        ly.mapv_inplace(|v| v * s);
    }
    let foreground = backscatter.mapv(|v| v > 0.0);
    Ok(PhantomTruth {
        spec: spec.clone(),
        backscatter,
        log_illumination: [lx, ly],
        bands: [raw_x.bands, raw_y.bands],
        foreground,
    })
}

/// Samples `t*` in the order of `direction`, applies that scan's
/// illumination and noise, and removes blink rows and gaps.
pub fn simulate_scan(
    truth: &PhantomTruth,
    spec: &PhantomSpec,
    direction: ScanDirection,
) -> Result<RasterVolume, PhantomError> {
    let [n_x, n_y, depth] = spec.grid;
    if truth.backscatter.dim() != (n_y, n_x, depth) {
        return Err(PhantomError::GridMismatch(format!(
            "backscatter {:?} for grid {:?}",
            truth.backscatter.dim(),
            spec.grid
        )));
    }
    let (n_b, n_a) = spec.scan_shape(direction);
    let log = truth.log_illumination(direction);
    if log.dim() != (n_b, n_a) {
        return Err(PhantomError::GridMismatch(format!(
            "illumination {:?} for a {n_b} x {n_a} scan",
            log.dim()
        )));
    }
    let artifacts = scan_artifacts(spec, direction);
    let valid = artifacts.validity(n_b, n_a);
    let mut r = rng(spec.seed, STREAM_NOISE + direction.index() as u64);
    let noise = (spec.noise_sigma > 0.0)
        .then(|| Normal::new(3.0 * spec.noise_sigma, spec.noise_sigma).expect("valid normal"));
    let mut data = Array3::zeros((n_b, n_a, depth));
    for i in 0..n_b {
        for j in 0..n_a {
            let (y, x) = match direction {
                ScanDirection::XFast => (i, j),
                ScanDirection::YFast => (j, i),
            };
            let gain = log[[i, j]].exp();
            for k in 0..depth {
                let mut v = gain * truth.backscatter[[y, x, k]];
                if let Some(n) = &noise {
                    v = (v + n.sample(&mut r)).max(0.0);
                }
                // stored as f32 on disk; quantize so files round-trip exactly
                data[[i, j, k]] = if valid[[i, j]] { v as f32 as f64 } else { 0.0 };
            }
        }
    }
    Ok(RasterVolume::from_ascan_validity(data, direction, spec.spacing(), valid)?)
}

/// Truth plus the x-fast and y-fast scans.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom, PhantomError> {
    let truth = generate_truth(spec)?;
    let x = simulate_scan(&truth, spec, ScanDirection::XFast)?;
    let y = simulate_scan(&truth, spec, ScanDirection::YFast)?;
    Ok(Phantom {
        volumes: [x, y],
        truth,
    })
}
