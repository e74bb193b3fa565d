//! End-to-end correction of a set of co-registered volumes.

use thiserror::Error;

use crate::correction::{apply_correction, merge_volumes, CorrectionError};
use crate::objective::{CorrectionProblem, ObjectiveError, ObjectiveSettings};
use crate::optimize::{default_config, optimize, OptimizationTrace, OptimizerConfig, Termination};
use crate::preprocess::PreprocessConfig;
use crate::spline::CorrectionSet;
use crate::volume::RasterVolume;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Correction(#[from] CorrectionError),
    #[error("optimization diverged at iteration {0}")]
    Diverged(usize),
}

/// Every knob of a correction run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub lambda: f64,
    pub density_per_mm: f64,
    pub preprocess: PreprocessConfig,
    /// Step size; estimated from the data curvature when `None`.
    pub learning_rate: Option<f64>,
    pub momentum: f64,
    pub max_iterations: usize,
    pub rel_tolerance: f64,
    pub threads: usize,
    pub depth_stride: usize,
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            lambda: ObjectiveSettings::default().lambda,
            density_per_mm: 1.0,
            preprocess: PreprocessConfig::default(),
            learning_rate: None,
            momentum: 0.9,
            max_iterations: 500,
            rel_tolerance: 1e-6,
            threads: 1,
            depth_stride: 1,
            log_every: 10,
        }
    }
}

impl RunConfig {
    pub fn settings(&self) -> ObjectiveSettings {
        ObjectiveSettings {
            lambda: self.lambda,
            depth_stride: self.depth_stride,
            threads: self.threads,
            ..ObjectiveSettings::default()
        }
    }

    /// Optimizer settings for `problem`, filling in the estimated step size.
    pub fn optimizer(&self, problem: &CorrectionProblem) -> Result<OptimizerConfig, ObjectiveError> {
        let learning_rate = match self.learning_rate {
            Some(lr) => lr,
            None => default_config(problem)?.learning_rate,
        };
        Ok(OptimizerConfig {
            learning_rate,
            momentum: self.momentum,
            max_iterations: self.max_iterations,
            rel_tolerance: self.rel_tolerance,
            log_every: self.log_every,
        })
    }
}

#[derive(Debug)]
pub struct CorrectionOutcome {
    /// Input volumes with their fitted illumination removed, in input order.
    pub corrected: Vec<RasterVolume>,
    /// Corrected volumes merged on the grid of the first one.
    pub merged: RasterVolume,
    pub fields: CorrectionSet,
    pub trace: OptimizationTrace,
}

pub fn build_problem(volumes: Vec<RasterVolume>, config: &RunConfig) -> Result<CorrectionProblem, ObjectiveError> {
    CorrectionProblem::from_volumes(volumes, &config.preprocess, config.density_per_mm, config.settings())
}

/// Fits correction fields to `volumes`, applies them and merges the result.
pub fn correct_volumes(volumes: Vec<RasterVolume>, config: &RunConfig) -> Result<CorrectionOutcome, PipelineError> {
    let problem = build_problem(volumes, config)?;
    let optimizer = config.optimizer(&problem)?;
    let (fields, trace) = optimize(&problem, &optimizer)?;
    if trace.termination == Termination::Diverged {
        return Err(PipelineError::Diverged(trace.records.len().saturating_sub(1)));
    }
    let corrected = apply_fields(&problem, &fields)?;
    let merged = merge_volumes(&corrected, None)?;
    Ok(CorrectionOutcome {
        corrected,
        merged,
        fields,
        trace,
    })
}

/// Applies `fields` to the volumes of `problem` using its foreground masks.
pub fn apply_fields(problem: &CorrectionProblem, fields: &CorrectionSet) -> Result<Vec<RasterVolume>, CorrectionError> {
    if fields.fields.len() != problem.volumes().len() {
        return Err(CorrectionError::ShapeMismatch(format!(
            "{} fields for {} volumes",
            fields.fields.len(),
            problem.volumes().len()
        )));
    }
    problem
        .volumes()
        .iter()
        .zip(&fields.fields)
        .map(|(v, f)| apply_correction(&v.volume, &v.mask, f))
        .collect()
}
