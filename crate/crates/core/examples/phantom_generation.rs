//! Generates an orthogonal phantom pair and writes it as two volume file sets
//! plus the ground truth.
//!
//! `cargo run --release --example phantom_generation -- [OUT_DIR] [SEED]`

use std::path::PathBuf;

use octillum::io::{write_truth, write_volume};
use octillum::phantom::{generate_phantom, PhantomSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "phantom_out".into()));
    let seed = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);

    let spec = PhantomSpec { seed, ..PhantomSpec::default() };
    let phantom = generate_phantom(&spec)?;
    for volume in &phantom.volumes {
        let dir = out.join(volume.direction().as_str());
        write_volume(&dir, volume)?;
        let ill = phantom.truth.log_illumination(volume.direction());
        let (lo, hi) = ill.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        println!(
            "{}: dims {:?}, log illumination in [{lo:.3}, {hi:.3}], bands {:?}",
            dir.display(),
            volume.dims(),
            phantom.truth.bands(volume.direction())
        );
    }
    write_truth(&out.join("truth.json"), &phantom.truth)?;
    println!("truth written to {}", out.join("truth.json").display());
    Ok(())
}
