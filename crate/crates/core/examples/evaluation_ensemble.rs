//! Runs the correction on several phantom seeds and tabulates recovery and
//! en-face agreement.
//!
//! `cargo run --release --example evaluation_ensemble -- [SEEDS]`

use octillum::metrics::evaluate_pair;
use octillum::phantom::{generate_phantom, PhantomSpec};
use octillum::pipeline::{correct_volumes, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seeds: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(5);
    println!("seed  iters  MAD before  MAD after  reduction  illum RMS before  after");
    let mut total = 0.0;
    for seed in 0..seeds {
        let phantom = generate_phantom(&PhantomSpec { seed, ..PhantomSpec::default() })?;
        let outcome = correct_volumes(phantom.volumes.to_vec(), &RunConfig::default())?;
        let report = evaluate_pair(&phantom.volumes, &outcome.corrected, Some(&phantom.truth.log_illumination))?;
        total += report.reduction_percent;
        println!(
            "{seed:>4}  {:>5}  {:>10.5}  {:>9.5}  {:>8.1}%  {:>16.4}  {:.5}",
            outcome.trace.records.len() - 1,
            report.mad_before,
            report.mad_after,
            report.reduction_percent,
            report.illum_rmse_before.unwrap_or(f64::NAN),
            report.illum_rmse_after.unwrap_or(f64::NAN)
        );
    }
    println!("mean MAD reduction {:.1}%", total / seeds as f64);
    Ok(())
}
