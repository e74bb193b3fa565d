//! Corrects a phantom pair and exports en-face images of the inputs and the
//! merged result as PGM and CSV.
//!
//! `cargo run --release --example enface_export -- [OUT_DIR]`

use std::path::PathBuf;

use octillum::correction::{enface, merge_volumes};
use octillum::io::write_enface;
use octillum::phantom::{generate_phantom, PhantomSpec};
use octillum::pipeline::{correct_volumes, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "enface_out".into()));
    std::fs::create_dir_all(&out)?;
    let phantom = generate_phantom(&PhantomSpec { seed: 1, ..PhantomSpec::default() })?;
    let outcome = correct_volumes(phantom.volumes.to_vec(), &RunConfig::default())?;

    let images = [
        ("x-fast.pgm", enface(&phantom.volumes[0], None)?),
        ("merged_before.pgm", enface(&merge_volumes(&phantom.volumes, None)?, None)?),
        ("merged_after.pgm", enface(&outcome.merged, None)?),
        ("merged_after.csv", enface(&outcome.merged, None)?),
    ];
    for (name, image) in &images {
        let path = out.join(name);
        write_enface(&path, image)?;
        println!("{} ({} covered pixels)", path.display(), image.covered_count());
    }
    Ok(())
}
