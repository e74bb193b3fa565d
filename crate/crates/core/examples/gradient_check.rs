//! Compares the analytic objective gradient with central finite differences
//! on a small problem whose scans are registered through fractional
//! coordinates.
//!
//! `cargo run --example gradient_check`

use ndarray::{Array2, Array3};
use octillum::objective::{CorrectionProblem, ObjectiveSettings, ProblemVolume};
use octillum::preprocess::{log_transform, ForegroundMask};
use octillum::spline::KnotLayout;
use octillum::volume::{DenseMapping, RasterVolume, RegisteredGeometry, ScanDirection, Spacing};

fn volume(dims: (usize, usize, usize), dir: ScanDirection, phase: f64) -> Result<ProblemVolume, Box<dyn std::error::Error>> {
    let data = Array3::from_shape_fn(dims, |(i, j, k)| 1.5 + (phase + 0.7 * i as f64 + 0.3 * j as f64 + 0.5 * k as f64).sin());
    let v = RasterVolume::from_ascan_validity(data, dir, Spacing::new(0.5, 2.0), Array2::from_shape_fn((dims.0, dims.1), |(i, j)| (i + 2 * j) % 7 != 3))?;
    let log = log_transform(&v, 1e-6)?;
    let mask = ForegroundMask::from_array(&v, Array3::from_shape_fn(dims, |(i, j, k)| v.is_valid(i, j) && (i + j + k) % 4 != 0), 0.0);
    let layout = KnotLayout::build(dims.1, 0.5, 1.0)?;
    Ok(ProblemVolume::new(v, log, mask, layout)?)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (a, b, d) = (6, 7, 5);
    let x = volume((a, b, d), ScanDirection::XFast, 0.0)?;
    let y = volume((b, a, d), ScanDirection::YFast, 1.0)?;
    let mut problem = CorrectionProblem::new(vec![x, y], ObjectiveSettings { lambda: 0.05, ..Default::default() })?;
    let mapping = DenseMapping::from_fn([a, b, d], |i, j, k| [j as f64 + 0.3, i as f64 - 0.2, k as f64 + 0.1]);
    problem.set_geometry(0, 1, RegisteredGeometry::Dense(mapping))?;

    let c: Vec<f64> = (0..problem.parameter_count()).map(|n| 0.1 * ((n * 7 % 11) as f64 - 5.0)).collect();
    let fields = problem.zero_fields().with_flat(&c);
    let analytic = problem.evaluate(&fields)?.gradient.to_flat();
    let h = 1e-4;
    let mut worst = 0.0f64;
    for p in 0..c.len() {
        let mut up = c.clone();
        up[p] += h;
        let mut down = c.clone();
        down[p] -= h;
        let numeric = (problem.evaluate(&fields.with_flat(&up))?.total - problem.evaluate(&fields.with_flat(&down))?.total) / (2.0 * h);
        let scale = analytic[p].abs().max(numeric.abs());
        if scale > 0.0 {
            worst = worst.max((numeric - analytic[p]).abs() / scale);
        }
    }
    println!("{} components, largest relative difference {worst:.2e}", c.len());
    Ok(())
}
