//! Constrained least-squares objective over co-registered orthogonal scans.
//!
//! For every volume `M` and every orthogonally scanned volume `T`, each
//! foreground voxel of `M` is compared with the illumination-corrected log
//! signal of `T`, interpolated at the voxel's registered position:
//!
//! ```text
//! J(c) = sum_M sum_{T ⟂ M} sum_{ijk} (s~M_ijk(c) - W(S~T, x_ijk))^2 + λ ||c||²,  s.t. sum(c) = 0
//! s~_ijk = s_ijk + m_ijk * c_i(j)
//! ```
//!
//! Samples whose interpolation support touches a gap are dropped. The
//! zero-sum constraint is enforced by projection, see [`project_constraint`].

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use thiserror::Error;

use crate::preprocess::{preprocess, ForegroundMask, PreprocessConfig, PreprocessError};
use crate::resample::Stencil;
use crate::spline::{CorrectionField, CorrectionSet, KnotLayout, SplineError, SplineWeights};
use crate::volume::{LogVolume, RasterVolume, RegisteredGeometry, ScanDirection};

/// Upper bound on the number of B-scan chunks per volume pair. The partition
/// does not depend on the thread count, so results are identical for any
/// number of threads.
const MAX_CHUNKS: usize = 32;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("volume {0} has no orthogonally scanned partner; need both scan directions")]
    NoOrthogonalTarget(usize),
    #[error("geometry from volume {source_index} to volume {target}: {reason}")]
    GeometryMismatch {
        source_index: usize,
        target: usize,
        reason: String,
    },
    #[error("correction fields do not match the problem layout: {0}")]
    LayoutMismatch(String),
    #[error("invalid setting: {0}")]
    InvalidSetting(String),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

/// Objective hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveSettings {
    /// Weight of the L2 regulariser.
    pub lambda: f64,
    /// Divide the data term by the residual count and the regulariser by the
    /// control-value count, making `lambda` independent of volume size.
    pub normalize: bool,
    /// Use every `depth_stride`-th depth sample of the source volume.
    pub depth_stride: usize,
    /// Worker threads for evaluation; 0 picks the rayon default.
    pub threads: usize,
}

impl Default for ObjectiveSettings {
    fn default() -> Self {
        ObjectiveSettings {
            lambda: 1e-3,
            normalize: true,
            depth_stride: 1,
            threads: 1,
        }
    }
}

/// One volume of a correction problem with its derived inputs.
#[derive(Debug, Clone)]
pub struct ProblemVolume {
    pub volume: RasterVolume,
    pub log: LogVolume,
    pub mask: ForegroundMask,
    pub layout: KnotLayout,
    table: Vec<SplineWeights>,
}

impl ProblemVolume {
    pub fn new(
        volume: RasterVolume,
        log: LogVolume,
        mask: ForegroundMask,
        layout: KnotLayout,
    ) -> Result<Self, ObjectiveError> {
        let dims = volume.dims();
        if log.dims() != dims || mask.dims() != dims {
            return Err(ObjectiveError::LayoutMismatch(format!(
                "volume {:?}, log {:?}, mask {:?}",
                dims,
                log.dims(),
                mask.dims()
            )));
        }
        if layout.n_ascans() != volume.n_ascans() {
            return Err(ObjectiveError::LayoutMismatch(format!(
                "knot layout spans {} A-scans, volume has {}",
                layout.n_ascans(),
                volume.n_ascans()
            )));
        }
        let table = layout.table()?;
        Ok(ProblemVolume {
            volume,
            log,
            mask,
            layout,
            table,
        })
    }

    /// Log transform, foreground mask and knot layout with the given settings.
    pub fn prepare(
        volume: RasterVolume,
        config: &PreprocessConfig,
        density_per_mm: f64,
    ) -> Result<Self, ObjectiveError> {
        let (log, mask) = preprocess(&volume, config)?;
        let layout = KnotLayout::build(
            volume.n_ascans(),
            volume.spacing().transverse_mm,
            density_per_mm,
        )?;
        Self::new(volume, log, mask, layout)
    }

    pub fn direction(&self) -> ScanDirection {
        self.volume.direction()
    }

    pub(crate) fn table(&self) -> &[SplineWeights] {
        &self.table
    }
}

#[derive(Debug, Clone)]
struct Pair {
    source: usize,
    target: usize,
    geometry: RegisteredGeometry,
}

/// The set of co-registered volumes and objective settings.
pub struct CorrectionProblem {
    volumes: Vec<ProblemVolume>,
    pairs: Vec<Pair>,
    settings: ObjectiveSettings,
    pool: Option<rayon::ThreadPool>,
}

impl std::fmt::Debug for CorrectionProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CorrectionProblem")
            .field("volumes", &self.volumes.len())
            .field("pairs", &self.pairs.len())
            .field("settings", &self.settings)
            .finish()
    }
}

/// Result of one objective evaluation.
#[derive(Debug, Clone)]
pub struct ObjectiveReport {
    /// `sum(data_terms) + lambda * regularizer`
    pub total: f64,
    pub data_terms: Vec<f64>,
    pub regularizer: f64,
    pub constraint_value: f64,
    pub residual_count: usize,
    pub gradient: CorrectionSet,
}

/// Unnormalised data term of one source volume.
#[derive(Debug, Clone)]
pub struct DataTerm {
    pub value: f64,
    pub residual_count: usize,
    pub gradient: CorrectionSet,
}

impl CorrectionProblem {
    /// Pairs every volume with every orthogonally scanned one using
    /// [`RegisteredGeometry::between`].
    pub fn new(
        volumes: Vec<ProblemVolume>,
        settings: ObjectiveSettings,
    ) -> Result<Self, ObjectiveError> {
        if !(settings.lambda >= 0.0 && settings.lambda.is_finite()) {
            return Err(ObjectiveError::InvalidSetting(format!(
                "lambda must be >= 0, got {}",
                settings.lambda
            )));
        }
        if settings.depth_stride == 0 {
            return Err(ObjectiveError::InvalidSetting("depth stride must be >= 1".into()));
        }
        let mut pairs = Vec::new();
        for (m, vm) in volumes.iter().enumerate() {
            let mut found = false;
            for (t, vt) in volumes.iter().enumerate() {
                if vm.direction().is_orthogonal_to(vt.direction()) {
                    let geometry = RegisteredGeometry::between(vm.direction(), vt.direction());
                    check_geometry(m, t, vm, vt, &geometry)?;
                    pairs.push(Pair {
                        source: m,
                        target: t,
                        geometry,
                    });
                    found = true;
                }
            }
            if !found {
                return Err(ObjectiveError::NoOrthogonalTarget(m));
            }
        }
        if volumes.len() < 2 {
            return Err(ObjectiveError::NoOrthogonalTarget(0));
        }
        let pool = match settings.threads {
            1 => None,
            n => Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| ObjectiveError::ThreadPool(e.to_string()))?,
            ),
        };
        Ok(CorrectionProblem {
            volumes,
            pairs,
            settings,
            pool,
        })
    }

    /// Preprocesses raw volumes and builds the problem.
    pub fn from_volumes(
        volumes: Vec<RasterVolume>,
        preprocess: &PreprocessConfig,
        density_per_mm: f64,
        settings: ObjectiveSettings,
    ) -> Result<Self, ObjectiveError> {
        let prepared = volumes
            .into_iter()
            .map(|v| ProblemVolume::prepare(v, preprocess, density_per_mm))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(prepared, settings)
    }

    /// Replaces the mapping of `source` voxels into `target`'s index frame.
    pub fn set_geometry(
        &mut self,
        source: usize,
        target: usize,
        geometry: RegisteredGeometry,
    ) -> Result<(), ObjectiveError> {
        let pair = self
            .pairs
            .iter_mut()
            .find(|p| p.source == source && p.target == target)
            .ok_or_else(|| ObjectiveError::GeometryMismatch {
                source_index: source,
                target,
                reason: "volumes are not an orthogonal pair".into(),
            })?;
        check_geometry(
            source,
            target,
            &self.volumes[source],
            &self.volumes[target],
            &geometry,
        )?;
        pair.geometry = geometry;
        Ok(())
    }

    pub fn volumes(&self) -> &[ProblemVolume] {
        &self.volumes
    }

    pub fn settings(&self) -> &ObjectiveSettings {
        &self.settings
    }

    /// Mapping used for the `(source, target)` pair, if they are orthogonal.
    pub fn geometry(&self, source: usize, target: usize) -> Option<&RegisteredGeometry> {
        self.pairs
            .iter()
            .find(|p| p.source == source && p.target == target)
            .map(|p| &p.geometry)
    }

    /// All-zero control values, the uniform-illumination start.
    pub fn zero_fields(&self) -> CorrectionSet {
        CorrectionSet::new(
            self.volumes
                .iter()
                .map(|v| CorrectionField::zeros(v.volume.n_bscans(), v.layout.clone()))
                .collect(),
        )
    }

    pub fn parameter_count(&self) -> usize {
        self.volumes
            .iter()
            .map(|v| v.volume.n_bscans() * v.layout.len())
            .sum()
    }

    fn check_fields(&self, fields: &CorrectionSet) -> Result<(), ObjectiveError> {
        if fields.fields.len() != self.volumes.len() {
            return Err(ObjectiveError::LayoutMismatch(format!(
                "{} fields for {} volumes",
                fields.fields.len(),
                self.volumes.len()
            )));
        }
        for (n, (f, v)) in fields.fields.iter().zip(&self.volumes).enumerate() {
            if f.layout != v.layout || f.values.dim() != (v.volume.n_bscans(), v.layout.len()) {
                return Err(ObjectiveError::LayoutMismatch(format!(
                    "field {n} has shape {:?}, expected ({}, {})",
                    f.values.dim(),
                    v.volume.n_bscans(),
                    v.layout.len()
                )));
            }
        }
        Ok(())
    }

    /// Raw data term of volume `m` summed over its orthogonal targets.
    pub fn data_term(&self, m: usize, fields: &CorrectionSet) -> Result<DataTerm, ObjectiveError> {
        self.check_fields(fields)?;
        if m >= self.volumes.len() {
            return Err(ObjectiveError::NoOrthogonalTarget(m));
        }
        let spline_values = self.spline_values(fields);
        let mut ascan_grad = self.zero_ascan_grads();
        let mut value = 0.0;
        let mut residual_count = 0;
        for pair in self.pairs.iter().filter(|p| p.source == m) {
            let acc = self.pair_term(pair, &spline_values, &mut ascan_grad);
            value += acc.0;
            residual_count += acc.1;
        }
        Ok(DataTerm {
            value,
            residual_count,
            gradient: self.knot_gradient(fields, &ascan_grad, 1.0),
        })
    }

    /// Objective value, its parts and the full gradient at `fields`.
    pub fn evaluate(&self, fields: &CorrectionSet) -> Result<ObjectiveReport, ObjectiveError> {
        self.check_fields(fields)?;
        let (data_terms, mut gradient, residual_count) = self.data_terms(fields);

        let n_params = fields.len();
        let reg_scale = if self.settings.normalize && n_params > 0 {
            1.0 / n_params as f64
        } else {
            1.0
        };
        let (reg, reg_grad) = regularizer(fields);
        let lambda = self.settings.lambda;
        for (g, r) in gradient.fields.iter_mut().zip(&reg_grad.fields) {
            g.values.scaled_add(lambda * reg_scale, &r.values);
        }
        let regularizer = reg * reg_scale;
        Ok(ObjectiveReport {
            total: data_terms.iter().sum::<f64>() + lambda * regularizer,
            data_terms,
            regularizer,
            constraint_value: constraint_value(fields),
            residual_count,
            gradient,
        })
    }

    /// Summed data term (normalised if configured), its flat gradient and
    /// the residual count.
    pub(crate) fn data_part(
        &self,
        fields: &CorrectionSet,
    ) -> Result<(f64, Vec<f64>, usize), ObjectiveError> {
        self.check_fields(fields)?;
        let (terms, gradient, count) = self.data_terms(fields);
        Ok((terms.iter().sum(), gradient.to_flat(), count))
    }

    fn data_terms(&self, fields: &CorrectionSet) -> (Vec<f64>, CorrectionSet, usize) {
        let spline_values = self.spline_values(fields);
        let mut ascan_grad = self.zero_ascan_grads();
        let mut data_terms = vec![0.0; self.volumes.len()];
        let mut residual_count = 0;
        for pair in &self.pairs {
            let (v, n) = self.pair_term(pair, &spline_values, &mut ascan_grad);
            data_terms[pair.source] += v;
            residual_count += n;
        }
        let data_scale = if self.settings.normalize && residual_count > 0 {
            1.0 / residual_count as f64
        } else {
            1.0
        };
        for d in &mut data_terms {
            *d *= data_scale;
        }
        let gradient = self.knot_gradient(fields, &ascan_grad, data_scale);
        (data_terms, gradient, residual_count)
    }

    /// Number of residuals the data term would include; independent of the
    /// control values.
    pub fn residual_count(&self) -> usize {
        let fields = self.zero_fields();
        let spline_values = self.spline_values(&fields);
        let mut scratch = self.zero_ascan_grads();
        self.pairs
            .iter()
            .map(|p| self.pair_term(p, &spline_values, &mut scratch).1)
            .sum()
    }

    fn spline_values(&self, fields: &CorrectionSet) -> Vec<Array2<f64>> {
        fields
            .fields
            .iter()
            .zip(&self.volumes)
            .map(|(f, v)| f.ascan_values_with(v.table()))
            .collect()
    }

    fn zero_ascan_grads(&self) -> Vec<Array2<f64>> {
        self.volumes
            .iter()
            .map(|v| Array2::zeros((v.volume.n_bscans(), v.volume.n_ascans())))
            .collect()
    }

    /// Chain rule from per-A-scan spline values to knot values.
    fn knot_gradient(
        &self,
        fields: &CorrectionSet,
        ascan_grad: &[Array2<f64>],
        scale: f64,
    ) -> CorrectionSet {
        let mut out = fields.zeros_like();
        for ((g, f), v) in ascan_grad.iter().zip(&mut out.fields).zip(&self.volumes) {
            for (i, mut row) in f.values.outer_iter_mut().enumerate() {
                let row = row.as_slice_mut().expect("standard layout");
                for (j, w) in v.table().iter().enumerate() {
                    let gij = g[[i, j]];
                    if gij != 0.0 {
                        w.scatter(scale * gij, row);
                    }
                }
            }
        }
        out
    }

    /// Sum of squared residuals of one (source, target) pair and its count;
    /// gradient with respect to the spline values is added to `ascan_grad`.
    fn pair_term(
        &self,
        pair: &Pair,
        spline_values: &[Array2<f64>],
        ascan_grad: &mut [Array2<f64>],
    ) -> (f64, usize) {
        let src = &self.volumes[pair.source];
        let n_b = src.volume.n_bscans();
        let n_chunks = n_b.min(MAX_CHUNKS);
        let bounds: Vec<(usize, usize)> = (0..n_chunks)
            .map(|c| (c * n_b / n_chunks, (c + 1) * n_b / n_chunks))
            .collect();
        let run = |&(lo, hi): &(usize, usize)| self.chunk_term(pair, spline_values, lo, hi);
        let partials: Vec<ChunkTerm> = match &self.pool {
            None => bounds.iter().map(run).collect(),
            Some(pool) => pool.install(|| bounds.par_iter().map(run).collect()),
        };
        let mut value = 0.0;
        let mut count = 0;
        for (p, &(lo, _)) in partials.iter().zip(&bounds) {
            value += p.value;
            count += p.count;
            let own = &mut ascan_grad[pair.source];
            for (r, row) in p.own.outer_iter().enumerate() {
                let mut dst = own.row_mut(lo + r);
                dst += &row;
            }
            ascan_grad[pair.target] += &p.target;
        }
        (value, count)
    }

    fn chunk_term(
        &self,
        pair: &Pair,
        spline_values: &[Array2<f64>],
        lo: usize,
        hi: usize,
    ) -> ChunkTerm {
        let src = &self.volumes[pair.source];
        let tgt = &self.volumes[pair.target];
        let [_, n_a, n_d] = src.volume.dims();
        let t_dims = tgt.volume.dims();
        let t_valid = tgt.volume.ascan_validity();
        let t_log: &Array3<f64> = tgt.log.data();
        let t_mask = tgt.mask.mask();
        let t_c = &spline_values[pair.target];
        let s_c = &spline_values[pair.source];
        let s_log = src.log.data();
        let s_mask = src.mask.mask();
        let stride = self.settings.depth_stride;

        let mut out = ChunkTerm {
            value: 0.0,
            count: 0,
            own: Array2::zeros((hi - lo, n_a)),
            target: Array2::zeros((t_dims[0], t_dims[1])),
        };
        // Identity and transposed mappings land on grid nodes, where the
        // interpolation stencil is the single voxel itself.
        let node_map: Option<NodeMap> = match pair.geometry {
            RegisteredGeometry::Identity => Some(|i, j| (i, j)),
            RegisteredGeometry::Transposed => Some(|i, j| (j, i)),
            RegisteredGeometry::Dense(_) => None,
        };
        for i in lo..hi {
            for j in 0..n_a {
                if !src.volume.is_valid(i, j) {
                    continue;
                }
                let c_src = s_c[[i, j]];
                let mut own_g = 0.0;
                if let Some(map) = node_map {
                    let (ti, tj) = map(i, j);
                    if ti >= t_dims[0] || tj >= t_dims[1] || !t_valid[[ti, tj]] {
                        continue;
                    }
                    let c_tgt = t_c[[ti, tj]];
                    let mut tgt_g = 0.0;
                    let sl = ascan(s_log, i, j);
                    let sm = ascan(s_mask, i, j);
                    let tl = ascan(t_log, ti, tj);
                    let tm = ascan(t_mask, ti, tj);
                    for k in (0..n_d.min(t_dims[2])).step_by(stride) {
                        if !sm[k] {
                            continue;
                        }
                        let fg = tm[k];
                        let sample = if fg { tl[k] + c_tgt } else { tl[k] };
                        let r = sl[k] + c_src - sample;
                        out.value += r * r;
                        out.count += 1;
                        own_g += 2.0 * r;
                        if fg {
                            tgt_g -= 2.0 * r;
                        }
                    }
                    out.target[[ti, tj]] += tgt_g;
                    out.own[[i - lo, j]] += own_g;
                    continue;
                }
                for k in (0..n_d).step_by(stride) {
                    if !s_mask[[i, j, k]] {
                        continue;
                    }
                    let coord = pair.geometry.map_unchecked(i, j, k);
                    let Some(stencil) = Stencil::new(coord, t_dims) else {
                        continue;
                    };
                    if !stencil.support_is_valid(t_valid) {
                        continue;
                    }
                    let mut sample = 0.0;
                    for (ti, tj, tk, w) in stencil.iter() {
                        let mut s = t_log[[ti, tj, tk]];
                        if t_mask[[ti, tj, tk]] {
                            s += t_c[[ti, tj]];
                        }
                        sample += w * s;
                    }
                    let r = s_log[[i, j, k]] + c_src - sample;
                    out.value += r * r;
                    out.count += 1;
                    own_g += 2.0 * r;
                    for (ti, tj, tk, w) in stencil.iter() {
                        if t_mask[[ti, tj, tk]] {
                            out.target[[ti, tj]] -= 2.0 * r * w;
                        }
                    }
                }
                out.own[[i - lo, j]] += own_g;
            }
        }
        out
    }
}

#[inline]
fn ascan<T>(a: &Array3<T>, i: usize, j: usize) -> &[T] {
    let n = a.dim().2;
    let start = (i * a.dim().1 + j) * n;
    &a.as_slice().expect("standard layout")[start..start + n]
}

/// Source A-scan `(i, j)` to the target A-scan it lands on.
type NodeMap = fn(usize, usize) -> (usize, usize);

struct ChunkTerm {
    value: f64,
    count: usize,
    own: Array2<f64>,
    target: Array2<f64>,
}

fn check_geometry(
    m: usize,
    t: usize,
    vm: &ProblemVolume,
    vt: &ProblemVolume,
    geometry: &RegisteredGeometry,
) -> Result<(), ObjectiveError> {
    let [a, b, c] = vm.volume.dims();
    let target = vt.volume.dims();
    let mismatch = |reason: String| ObjectiveError::GeometryMismatch {
        source_index: m,
        target: t,
        reason,
    };
    match geometry {
        RegisteredGeometry::Identity if target != [a, b, c] => Err(mismatch(format!(
            "identity mapping needs equal dims, got {:?} and {:?}",
            [a, b, c],
            target
        ))),
        RegisteredGeometry::Transposed if target != [b, a, c] => Err(mismatch(format!(
            "transposed mapping needs dims {:?}, got {:?}",
            [b, a, c],
            target
        ))),
        RegisteredGeometry::Dense(d) if d.dims() != [a, b, c] => Err(mismatch(format!(
            "dense mapping covers {:?}, source has {:?}",
            d.dims(),
            [a, b, c]
        ))),
        _ => Ok(()),
    }
}

/// Corrected log signal `s + m * c`.
#[inline]
pub fn corrected_log_value(s: f64, m: bool, c: f64) -> f64 {
    if m {
        s + c
    } else {
        s
    }
}

/// `||c||²` and its gradient `2c`.
pub fn regularizer(fields: &CorrectionSet) -> (f64, CorrectionSet) {
    let mut grad = fields.clone();
    let mut value = 0.0;
    for f in &mut grad.fields {
        value += f.values.iter().map(|c| c * c).sum::<f64>();
        f.values.mapv_inplace(|c| 2.0 * c);
    }
    (value, grad)
}

/// Sum of all control values of all volumes.
pub fn constraint_value(fields: &CorrectionSet) -> f64 {
    fields.fields.iter().map(|f| f.values.sum()).sum()
}

/// Orthogonal projection onto the zero-sum subspace: subtracts the global mean.
pub fn project_constraint(fields: &CorrectionSet) -> CorrectionSet {
    let mut flat = fields.to_flat();
    project_flat(&mut flat);
    fields.with_flat(&flat)
}

pub(crate) fn project_flat(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    for v in values.iter_mut() {
        *v -= mean;
    }
}
