//! Projected heavy-ball gradient descent from uniform illumination.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::objective::{project_flat, CorrectionProblem, ObjectiveError};
use crate::spline::CorrectionSet;

/// Relative objective decrease is measured over this many iterations.
pub const CONVERGENCE_WINDOW: usize = 5;

const POWER_ITERATIONS: usize = 10;
const FALLBACK_LEARNING_RATE: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// Heavy-ball coefficient in `[0, 1)`.
    pub momentum: f64,
    pub max_iterations: usize,
    pub rel_tolerance: f64,
    /// Stride of iterations written to text logs; 0 keeps only the last.
    pub log_every: usize,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let bad = |msg: String| Err(ObjectiveError::InvalidSetting(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be >= 1".into());
        }
        if self.rel_tolerance.is_nan() || self.rel_tolerance <= 0.0 {
            return bad(format!("rel_tolerance must be > 0, got {}", self.rel_tolerance));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Converged,
    MaxIterations,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub total: f64,
    pub data: f64,
    pub regularizer: f64,
    pub gradient_norm: f64,
    pub step_norm: f64,
    /// Sum of all control values after projection.
    pub constraint: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    pub records: Vec<IterationRecord>,
    pub termination: Termination,
    pub best_iteration: usize,
    pub best_total: f64,
    pub learning_rate: f64,
    pub parameter_count: usize,
    pub residual_count: usize,
}

impl OptimizationTrace {
    pub fn succeeded(&self) -> bool {
        self.termination != Termination::Diverged
    }

    /// Lowest objective seen up to and including each recorded iteration.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.records
            .iter()
            .map(|r| {
                best = best.min(r.total);
                best
            })
            .collect()
    }
}

/// Step size from a power-iteration estimate of the data-term curvature.
pub fn default_config(problem: &CorrectionProblem) -> Result<OptimizerConfig, ObjectiveError> {
    let learning_rate = match estimate_curvature(problem)? {
        Some(l) if l > 0.0 => 0.5 / l,
        _ => FALLBACK_LEARNING_RATE,
    };
    Ok(OptimizerConfig {
        learning_rate,
        momentum: 0.9,
        max_iterations: 500,
        rel_tolerance: 1e-6,
        log_every: 10,
    })
}

/// Largest eigenvalue of the data-term Hessian on the zero-sum subspace, or
/// `None` when there are no residuals.
///
/// The data term is quadratic in the control values, so a Hessian-vector
/// product is the gradient difference `g(v) - g(0)`.
pub fn estimate_curvature(problem: &CorrectionProblem) -> Result<Option<f64>, ObjectiveError> {
    let zero = problem.zero_fields();
    let (_, g0, count) = problem.data_part(&zero)?;
    if count == 0 || zero.is_empty() {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<f64> = (0..zero.len()).map(|_| rng.random::<f64>() - 0.5).collect();
    project_flat(&mut v);
    if !normalize(&mut v) {
        return Ok(None);
    }
    let mut estimate = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let (_, gv, _) = problem.data_part(&zero.with_flat(&v))?;
        let mut hv: Vec<f64> = gv.iter().zip(&g0).map(|(a, b)| a - b).collect();
        project_flat(&mut hv);
        estimate = dot(&v, &hv);
        v = hv;
        if !normalize(&mut v) {
            break;
        }
    }
    Ok(Some(estimate))
}

/// Minimises the objective from `c = 0`, projecting every iterate onto the
/// zero-sum subspace. Returns the best iterate seen.
pub fn optimize(
    problem: &CorrectionProblem,
    config: &OptimizerConfig,
) -> Result<(CorrectionSet, OptimizationTrace), ObjectiveError> {
    optimize_from(problem, config, &problem.zero_fields())
}

/// [`optimize`] from an arbitrary start (projected first).
pub fn optimize_from(
    problem: &CorrectionProblem,
    config: &OptimizerConfig,
    start: &CorrectionSet,
) -> Result<(CorrectionSet, OptimizationTrace), ObjectiveError> {
    config.validate()?;
    let mut c = start.to_flat();
    project_flat(&mut c);
    let mut fields = start.with_flat(&c);
    let mut velocity = vec![0.0; c.len()];

    let mut report = problem.evaluate(&fields)?;
    let mut records = Vec::new();
    let mut best = (0usize, report.total, c.clone());
    let mut history = vec![report.total];
    let mut grad = report.gradient.to_flat();
    project_flat(&mut grad);
    records.push(IterationRecord {
        iteration: 0,
        total: report.total,
        data: report.data_terms.iter().sum(),
        regularizer: report.regularizer,
        gradient_norm: norm(&grad),
        step_norm: 0.0,
        constraint: report.constraint_value,
    });

    let mut termination = if !report.total.is_finite() {
        Termination::Diverged
    } else if grad.iter().all(|&g| g == 0.0) {
        Termination::Converged
    } else {
        Termination::MaxIterations
    };

    if termination == Termination::MaxIterations {
        for iteration in 1..=config.max_iterations {
            for (v, g) in velocity.iter_mut().zip(&grad) {
                *v = config.momentum * *v - config.learning_rate * g;
            }
            let previous = c.clone();
            for (x, v) in c.iter_mut().zip(&velocity) {
                *x += v;
            }
            project_flat(&mut c);
            let step_norm = c
                .iter()
                .zip(&previous)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            fields.set_flat(&c);
            report = problem.evaluate(&fields)?;
            grad = report.gradient.to_flat();
            project_flat(&mut grad);
            records.push(IterationRecord {
                iteration,
                total: report.total,
                data: report.data_terms.iter().sum(),
                regularizer: report.regularizer,
                gradient_norm: norm(&grad),
                step_norm,
                constraint: report.constraint_value,
            });
            if !report.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                termination = Termination::Diverged;
                break;
            }
            if report.total < best.1 {
                best = (iteration, report.total, c.clone());
            }
            history.push(report.total);
            if iteration >= CONVERGENCE_WINDOW {
                let before = history[iteration - CONVERGENCE_WINDOW];
                let now = history[iteration];
                if (before - now).abs() <= config.rel_tolerance * before.abs() {
                    termination = Termination::Converged;
                    break;
                }
            }
        }
    }

    let (best_iteration, best_total, best_c) = best;
    let trace = OptimizationTrace {
        records,
        termination,
        best_iteration,
        best_total,
        learning_rate: config.learning_rate,
        parameter_count: c.len(),
        residual_count: report.residual_count,
    };
    Ok((start.with_flat(&best_c), trace))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn normalize(v: &mut [f64]) -> bool {
    let n = norm(v);
    if n > 0.0 && n.is_finite() {
        v.iter_mut().for_each(|x| *x /= n);
        true
    } else {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{ObjectiveSettings, ProblemVolume};
    use crate::preprocess::{log_transform, ForegroundMask};
    use crate::spline::KnotLayout;
    use crate::volume::{RasterVolume, ScanDirection, Spacing};
    use ndarray::Array3;

    fn pv(data: Array3<f64>, dir: ScanDirection) -> ProblemVolume {
        let v = RasterVolume::fully_valid(data, dir, Spacing::new(0.5, 1.0)).unwrap();
        let log = log_transform(&v, 1e-6).unwrap();
        let mask = ForegroundMask::from_array(&v, Array3::from_elem(v.data().dim(), true), 0.0);
        let layout = KnotLayout::build(v.n_ascans(), 0.5, 1.0).unwrap();
        ProblemVolume::new(v, log, mask, layout).unwrap()
    }

    fn problem(x: Array3<f64>, y: Array3<f64>, lambda: f64, threads: usize) -> CorrectionProblem {
        CorrectionProblem::new(
            vec![pv(x, ScanDirection::XFast), pv(y, ScanDirection::YFast)],
            ObjectiveSettings {
                lambda,
                threads,
                ..Default::default()
            },
        )
        .unwrap()
    }

    /// Tissue with per-A-scan gains on both scans of an 8 x 8 x 6 grid.
    fn textured_pair() -> (Array3<f64>, Array3<f64>) {
        let t = |x: usize, y: usize, k: usize| 1.0 + 0.3 * ((x * 7 + y * 3 + k * 5) % 11) as f64 / 11.0;
        let gx = |y: usize, x: usize| (0.3 * (x as f64 * 0.7 + y as f64).sin()).exp();
        let gy = |x: usize, y: usize| (-0.2 * (y as f64 * 0.5).cos() + 0.05 * x as f64).exp();
        let x = Array3::from_shape_fn((8, 8, 6), |(i, j, k)| gx(i, j) * t(j, i, k));
        let y = Array3::from_shape_fn((8, 8, 6), |(i, j, k)| gy(i, j) * t(i, j, k));
        (x, y)
    }

    fn config(problem: &CorrectionProblem, max_iterations: usize) -> OptimizerConfig {
        OptimizerConfig {
            max_iterations,
            ..default_config(problem).unwrap()
        }
    }

    #[test]
    fn symmetric_split_matches_closed_form() {
        let delta: f64 = 0.4;
        let lambda = 1e-3;
        let x = Array3::from_elem((8, 8, 4), delta.exp());
        let y = Array3::from_elem((8, 8, 4), 1.0);
        let p = problem(x, y, lambda, 1);
        let cfg = OptimizerConfig {
            rel_tolerance: 1e-12,
            ..config(&p, 2000)
        };
        let (fields, trace) = optimize(&p, &cfg).unwrap();
        assert_eq!(trace.termination, Termination::Converged);
        // J = (delta + c_x - c_y)^2 + lambda (c_x^2 + c_y^2) / 2 with c_y = -c_x
        // for constant fields. Smooth fields common to both scans are invisible
        // to the data term, so the fitted controls are not constant; their
        // per-volume mean over the A-scans is.
        let expected = -2.0 * delta / (4.0 + lambda);
        let means: Vec<f64> = fields.fields.iter().map(|f| f.ascan_values().mean().unwrap()).collect();
        assert!((means[0] - expected).abs() < 1e-6, "{} vs {expected}", means[0]);
        assert!((means[1] + expected).abs() < 1e-6, "{} vs {}", means[1], -expected);
    }

    #[test]
    fn constraint_holds_at_every_iteration() {
        let (x, y) = textured_pair();
        let p = problem(x, y, 1e-3, 1);
        let (fields, trace) = optimize(&p, &config(&p, 60)).unwrap();
        let n = p.parameter_count() as f64;
        for r in &trace.records {
            assert!(r.constraint.abs() < 1e-9 * n, "iteration {}: {}", r.iteration, r.constraint);
        }
        assert!(fields.to_flat().iter().sum::<f64>().abs() < 1e-9 * n);
    }

    #[test]
    fn best_iterate_is_the_minimum_of_the_trace() {
        let (x, y) = textured_pair();
        let p = problem(x, y, 1e-3, 1);
        let (fields, trace) = optimize(&p, &config(&p, 80)).unwrap();
        let best = trace.best_so_far();
        assert!(best.windows(2).all(|w| w[1] <= w[0]));
        let min = trace.records.iter().map(|r| r.total).fold(f64::INFINITY, f64::min);
        assert_eq!(trace.best_total, min);
        assert_eq!(trace.records[trace.best_iteration].total, min);
        assert_eq!(p.evaluate(&fields).unwrap().total, min);
        assert!(trace.best_total < trace.records[0].total);
    }

    #[test]
    fn perturbation_without_data_signal_shrinks() {
        // identical tissue, no illumination: any field only adds cost, and the
        // regulariser pulls the part the data cannot see back to zero
        let (_, y) = textured_pair();
        let x = y.clone().permuted_axes([1, 0, 2]).as_standard_layout().into_owned();
        let p = problem(x, y, 0.1, 1);
        let mut start = p.zero_fields();
        let flat: Vec<f64> = (0..start.to_flat().len()).map(|n| 0.05 * ((n * 37 % 13) as f64 - 6.0)).collect();
        start.set_flat(&flat);
        let start_norm = norm(&start.to_flat());
        let (fields, trace) = optimize_from(&p, &config(&p, 1000), &start).unwrap();
        assert!(trace.best_total < trace.records[0].total);
        assert!(norm(&fields.to_flat()) < 0.5 * start_norm);
    }

    #[test]
    fn thread_count_does_not_change_the_result() {
        let (x, y) = textured_pair();
        let p1 = problem(x.clone(), y.clone(), 1e-3, 1);
        let p4 = problem(x, y, 1e-3, 4);
        let (f1, t1) = optimize(&p1, &config(&p1, 40)).unwrap();
        let (f4, t4) = optimize(&p4, &config(&p4, 40)).unwrap();
        assert_eq!(f1.to_flat(), f4.to_flat());
        assert_eq!(t1, t4);
    }

    #[test]
    fn zero_gradient_converges_immediately() {
        let y = Array3::from_elem((6, 6, 3), 2.0);
        let p = problem(y.clone(), y, 1e-3, 1);
        let (fields, trace) = optimize(&p, &config(&p, 10)).unwrap();
        assert_eq!(trace.termination, Termination::Converged);
        assert_eq!(trace.records.len(), 1);
        assert!(fields.to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn huge_step_is_reported_as_divergence() {
        let (x, y) = textured_pair();
        let p = problem(x, y, 1e-3, 1);
        let cfg = OptimizerConfig {
            learning_rate: 1e200,
            ..config(&p, 50)
        };
        let (_, trace) = optimize(&p, &cfg).unwrap();
        assert_eq!(trace.termination, Termination::Diverged);
        assert!(!trace.succeeded());
        assert_eq!(trace.best_iteration, 0);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let ok = OptimizerConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            max_iterations: 10,
            rel_tolerance: 1e-6,
            log_every: 1,
        };
        assert!(ok.validate().is_ok());
        for bad in [
            OptimizerConfig { learning_rate: 0.0, ..ok.clone() },
            OptimizerConfig { learning_rate: f64::NAN, ..ok.clone() },
            OptimizerConfig { momentum: 1.0, ..ok.clone() },
            OptimizerConfig { momentum: -0.1, ..ok.clone() },
            OptimizerConfig { max_iterations: 0, ..ok.clone() },
            OptimizerConfig { rel_tolerance: 0.0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}
