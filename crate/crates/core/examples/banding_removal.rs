//! Shows a single illumination band in the merged en-face image disappearing
//! after correction.
//!
//! `cargo run --release --example banding_removal`

use octillum::correction::{enface, merge_volumes, EnfaceImage};
use octillum::phantom::{generate_phantom, PhantomSpec};
use octillum::pipeline::{correct_volumes, RunConfig};
use octillum::volume::ScanDirection;

/// Mean of every covered row of the image.
fn row_means(image: &EnfaceImage) -> Vec<f64> {
    image
        .values
        .outer_iter()
        .zip(image.covered.outer_iter())
        .map(|(v, c)| {
            let picked: Vec<f64> = v.iter().zip(c.iter()).filter(|(_, &c)| c).map(|(x, _)| *x).collect();
            picked.iter().sum::<f64>() / picked.len().max(1) as f64
        })
        .collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = PhantomSpec {
        seed: 21,
        band_count: 1,
        jump_probability: 0.0,
        ..PhantomSpec::default()
    };
    let phantom = generate_phantom(&spec)?;
    let bands = phantom.truth.bands(ScanDirection::XFast).to_vec();
    println!("x-fast band rows: {bands:?}");

    let before = row_means(&enface(&merge_volumes(&phantom.volumes, None)?, None)?);
    let outcome = correct_volumes(phantom.volumes.to_vec(), &RunConfig::default())?;
    let after = row_means(&enface(&outcome.merged, None)?);

    println!("row  jump before  jump after");
    for &(lo, hi) in &bands {
        for b in [lo, hi] {
            if b == 0 || b >= before.len() {
                continue;
            }
            for r in b.saturating_sub(2)..(b + 2).min(before.len()) {
                if r == 0 {
                    continue;
                }
                let mark = if r == b { "  <- band edge" } else { "" };
                println!(
                    "{r:>3}  {:>11.5}  {:>10.5}{mark}",
                    before[r] - before[r - 1],
                    after[r] - after[r - 1]
                );
            }
        }
    }
    Ok(())
}
