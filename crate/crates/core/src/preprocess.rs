//! Log-domain signal and foreground masking.

use ndarray::{Array3, Axis};
use thiserror::Error;

use crate::volume::{LogVolume, RasterVolume};

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("log floor must be positive, got {0}")]
    NonPositiveEpsilon(f64),
    #[error("median kernel must be odd and at least 1, got {0}")]
    EvenKernel(usize),
    #[error("noise floor needs 8 <= top_rows < depth ({depth}) over at least one valid A-scan, got top_rows = {top_rows}")]
    InsufficientBackgroundSamples { top_rows: usize, depth: usize },
}

/// Binary tissue/background selector aligned with a volume.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundMask {
    mask: Array3<bool>,
    threshold: f64,
}

impl ForegroundMask {
    pub fn mask(&self) -> &Array3<bool> {
        &self.mask
    }

    /// Linear-scale intensity threshold the mask was computed with.
    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.mask[[i, j, k]]
    }

    pub fn dims(&self) -> [usize; 3] {
        crate::volume::dims_of(&self.mask)
    }

    /// Whether any voxel of A-scan `(i, j)` is foreground.
    pub fn ascan_has_foreground(&self, i: usize, j: usize) -> bool {
        self.mask.slice(ndarray::s![i, j, ..]).iter().any(|&m| m)
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Builds a mask directly, clearing voxels of invalid A-scans.
    ///
    /// Panics if the mask and volume shapes differ.
    pub fn from_array(volume: &RasterVolume, mask: Array3<bool>, threshold: f64) -> Self {
        assert_eq!(crate::volume::dims_of(&mask), volume.dims(), "mask dims");
        let mut mask = if mask.is_standard_layout() {
            mask
        } else {
            mask.as_standard_layout().into_owned()
        };
        for ((i, j, _), m) in mask.indexed_iter_mut() {
            if !volume.is_valid(i, j) {
                *m = false;
            }
        }
        ForegroundMask { mask, threshold }
    }
}

/// `s = ln(max(t, epsilon))`, validity carried over unchanged.
pub fn log_transform(volume: &RasterVolume, epsilon: f64) -> Result<LogVolume, PreprocessError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(PreprocessError::NonPositiveEpsilon(epsilon));
    }
    let data = volume.data().mapv(|t| t.max(epsilon).ln());
    Ok(LogVolume::from_parts(
        data,
        volume.ascan_validity().clone(),
        epsilon,
    ))
}

/// Default log floor: a millionth of the brightest voxel.
pub fn default_epsilon(volume: &RasterVolume) -> f64 {
    let max = volume.max_intensity();
    if max > 0.0 {
        1e-6 * max
    } else {
        1e-6
    }
}

/// 2D median filter inside each B-scan plane `(j, k)`.
///
/// The window is clipped at the image border. Invalid A-scans neither
/// contribute to windows nor get filtered themselves.
pub fn median_filter_bscans(
    volume: &RasterVolume,
    kernel: usize,
) -> Result<RasterVolume, PreprocessError> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(PreprocessError::EvenKernel(kernel));
    }
    if kernel == 1 {
        return Ok(volume.clone());
    }
    let r = kernel / 2;
    let [_, n_a, n_d] = volume.dims();
    let src = volume.data();
    let mut out = src.clone();
    let mut window = Vec::with_capacity(kernel * kernel);
    for (i, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
        for j in 0..n_a {
            if !volume.is_valid(i, j) {
                continue;
            }
            let j0 = j.saturating_sub(r);
            let j1 = (j + r).min(n_a - 1);
            for k in 0..n_d {
                let k0 = k.saturating_sub(r);
                let k1 = (k + r).min(n_d - 1);
                window.clear();
                for jj in j0..=j1 {
                    if !volume.is_valid(i, jj) {
                        continue;
                    }
                    for kk in k0..=k1 {
                        window.push(src[[i, jj, kk]]);
                    }
                }
                plane[[j, k]] = median(&mut window);
            }
        }
    }
    Ok(volume
        .with_data(out)
        .expect("median of valid intensities is a valid intensity"))
}

fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    let mid = n / 2;
    let (lower, m, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let m = *m;
    if n % 2 == 1 {
        m
    } else {
        let below = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (below + m)
    }
}

/// `mean + sigma_mult * std` over the first `top_rows` depth samples of all
/// valid A-scans, taken as the signal-free region above the tissue.
pub fn estimate_noise_floor(
    volume: &RasterVolume,
    top_rows: usize,
    sigma_mult: f64,
) -> Result<f64, PreprocessError> {
    let depth = volume.n_depth();
    let insufficient = PreprocessError::InsufficientBackgroundSamples { top_rows, depth };
    if top_rows < 8 || top_rows >= depth {
        return Err(insufficient);
    }
    let [n_b, n_a, _] = volume.dims();
    let mut n = 0usize;
    let mut sum = 0.0;
    for i in 0..n_b {
        for j in 0..n_a {
            if !volume.is_valid(i, j) {
                continue;
            }
            for &t in volume.ascan(i, j).iter().take(top_rows) {
                n += 1;
                sum += t;
            }
        }
    }
    if n == 0 {
        return Err(insufficient);
    }
    let mean = sum / n as f64;
    // second pass keeps the variance accurate when mean >> std
    let mut var = 0.0;
    for i in 0..n_b {
        for j in 0..n_a {
            if volume.is_valid(i, j) {
                for &t in volume.ascan(i, j).iter().take(top_rows) {
                    var += (t - mean) * (t - mean);
                }
            }
        }
    }
    let std = (var / n as f64).sqrt();
    Ok(mean + sigma_mult * std)
}

/// `m = 1` where the filtered intensity exceeds `t_min` inside valid A-scans.
pub fn compute_foreground_mask(filtered: &RasterVolume, t_min: f64) -> ForegroundMask {
    let mask = Array3::from_shape_fn(filtered.data().dim(), |(i, j, k)| {
        filtered.is_valid(i, j) && filtered.get(i, j, k) > t_min
    });
    ForegroundMask {
        mask,
        threshold: t_min,
    }
}

/// Knobs for [`preprocess`].
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    pub median_kernel: usize,
    pub noise_rows: usize,
    pub sigma_mult: f64,
    /// Fixed threshold; estimated from the top rows when `None`.
    pub t_min: Option<f64>,
    /// Fixed log floor; [`default_epsilon`] when `None`.
    pub epsilon: Option<f64>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            median_kernel: 3,
            noise_rows: 20,
            sigma_mult: 3.0,
            t_min: None,
            epsilon: None,
        }
    }
}

/// Log volume and foreground mask of one input volume.
pub fn preprocess(
    volume: &RasterVolume,
    config: &PreprocessConfig,
) -> Result<(LogVolume, ForegroundMask), PreprocessError> {
    let epsilon = config.epsilon.unwrap_or_else(|| default_epsilon(volume));
    let log = log_transform(volume, epsilon)?;
    let t_min = match config.t_min {
        Some(t) => t,
        None => estimate_noise_floor(volume, config.noise_rows, config.sigma_mult)?,
    };
    let filtered = median_filter_bscans(volume, config.median_kernel)?;
    Ok((log, compute_foreground_mask(&filtered, t_min)))
}
