//! Fits and removes illumination from a phantom pair and scores the result
//! against the known truth.
//!
//! `cargo run --release --example correct_pair -- [SEED]`

use ndarray::Array2;
use octillum::metrics::{evaluate_pair, foreground_ascans, illumination_recovery_error};
use octillum::optimize::optimize;
use octillum::phantom::{generate_phantom, PhantomSpec};
use octillum::pipeline::{apply_fields, build_problem, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(0);
    let phantom = generate_phantom(&PhantomSpec { seed, ..PhantomSpec::default() })?;

    let config = RunConfig::default();
    let problem = build_problem(phantom.volumes.to_vec(), &config)?;
    let optimizer = config.optimizer(&problem)?;
    println!("{} control values, step size {:.3e}", problem.parameter_count(), optimizer.learning_rate);
    let (fields, trace) = optimize(&problem, &optimizer)?;
    println!(
        "{:?} after {} iterations, objective {:.4e} -> {:.4e}",
        trace.termination,
        trace.records.len() - 1,
        trace.records[0].total,
        trace.best_total
    );

    let truth: Vec<&Array2<f64>> = problem
        .volumes()
        .iter()
        .map(|v| phantom.truth.log_illumination(v.direction()))
        .collect();
    let fg: Vec<Array2<bool>> = problem.volumes().iter().map(|v| foreground_ascans(&v.mask)).collect();
    let fitted: Vec<Array2<f64>> = fields.fields.iter().map(|f| f.ascan_values()).collect();
    let zeros: Vec<Array2<f64>> = fitted.iter().map(|c| Array2::zeros(c.dim())).collect();
    let before = illumination_recovery_error(&zeros, Some(&truth), &fg)?;
    let after = illumination_recovery_error(&fitted, Some(&truth), &fg)?;
    println!("log-illumination RMS error {before:.4} -> {after:.5} ({:.1}% lower)", 100.0 * (1.0 - after / before));

    let corrected = apply_fields(&problem, &fields)?;
    let report = evaluate_pair(&phantom.volumes, &corrected, None)?;
    println!(
        "en-face MAD {:.5} -> {:.5} ({:.1}% lower)",
        report.mad_before, report.mad_after, report.reduction_percent
    );
    Ok(())
}
