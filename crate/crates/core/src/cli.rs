//! Command-line front end: `phantom`, `correct`, `enface`, `evaluate`.
//!
//! Exit codes: 0 on success, 1 on invalid input or I/O failure, 2 when the
//! optimizer diverges.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::correction::{enface, resample_onto};
use crate::io::{
    read_truth, read_volume, write_corrections, write_enface, write_json_file, write_trace,
    write_truth, write_volume,
};
use crate::metrics::evaluate_pair;
use crate::phantom::{generate_phantom, PhantomSpec};
use crate::pipeline::{correct_volumes, PipelineError, RunConfig};
use crate::volume::{RasterVolume, RegisteredGeometry};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_DIVERGED: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "octillum", version, about = "Illumination correction for orthogonal OCT raster scans")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate an orthogonal phantom pair with known illumination.
    Phantom(PhantomArgs),
    /// Fit and remove illumination from co-registered orthogonal volumes.
    Correct(CorrectArgs),
    /// Render a depth-averaged en-face image as PGM or CSV.
    Enface(EnfaceArgs),
    /// Compare en-face agreement before and after correction.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
struct PhantomArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Grid size along x, y and depth.
    #[arg(long, num_args = 3, value_names = ["X", "Y", "D"])]
    size: Option<Vec<usize>>,
    #[arg(long)]
    illum_amplitude: Option<f64>,
    /// Probability of an illumination jump between neighbouring B-scans.
    #[arg(long)]
    jumps: Option<f64>,
    #[arg(long)]
    bands: Option<usize>,
    #[arg(long)]
    gaps: Option<usize>,
    #[arg(long)]
    blink_rows: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    spline_representable: bool,
}

#[derive(Debug, Args)]
struct CorrectArgs {
    #[arg(long, num_args = 2.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    lambda: Option<f64>,
    /// Knots per millimetre of B-scan length.
    #[arg(long)]
    density: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    depth_stride: Option<usize>,
    /// Fixed foreground threshold instead of the noise-floor estimate.
    #[arg(long)]
    t_min: Option<f64>,
    /// Signal-free rows at the top of each A-scan used for the noise floor.
    #[arg(long)]
    noise_rows: Option<usize>,
}

#[derive(Debug, Args)]
struct EnfaceArgs {
    #[arg(long)]
    input: PathBuf,
    /// Restrict the image to A-scans also present in this volume.
    #[arg(long)]
    overlap: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long, num_args = 2, required = true)]
    before: Vec<PathBuf>,
    #[arg(long, num_args = 2, required = true)]
    after: Vec<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// A failure with its exit code and message.
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn invalid(message: impl std::fmt::Display) -> Self {
        Failure {
            code: EXIT_INVALID,
            message: message.to_string(),
        }
    }
}

fn context<E: std::fmt::Display>(what: impl std::fmt::Display) -> impl FnOnce(E) -> Failure {
    move |e| Failure::invalid(format!("{what}: {e}"))
}

/// Runs the command line `args` (program name first) and returns the exit
/// code.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Phantom(a) => run_phantom(a),
        Command::Correct(a) => run_correct(a),
        Command::Enface(a) => run_enface(a),
        Command::Evaluate(a) => run_evaluate(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn load(path: &Path) -> Result<RasterVolume, Failure> {
    read_volume(path).map_err(|e| Failure::invalid(format!("cannot read volume: {e}")))
}

fn run_phantom(a: PhantomArgs) -> Result<(), Failure> {
    let mut spec = match a.size.as_deref() {
        Some(&[x, y, d]) => PhantomSpec::with_grid(x, y, d),
        Some(_) => return Err(Failure::invalid("--size takes three values")),
        None => PhantomSpec::default(),
    };
    spec.seed = a.seed;
    if let Some(v) = a.illum_amplitude {
        spec.illum_amplitude = v;
    }
    if let Some(v) = a.jumps {
        spec.jump_probability = v;
    }
    if let Some(v) = a.bands {
        spec.band_count = v;
    }
    if let Some(v) = a.gaps {
        spec.gap_count = v;
    }
    if let Some(v) = a.blink_rows {
        spec.blink_rows = v;
    }
    if let Some(v) = a.noise {
        spec.noise_sigma = v;
    }
    spec.spline_representable = a.spline_representable;
    let phantom = generate_phantom(&spec).map_err(Failure::invalid)?;
    for v in &phantom.volumes {
        let dir = a.out.join(v.direction().as_str());
        write_volume(&dir, v).map_err(Failure::invalid)?;
    }
    write_truth(&a.out.join("truth.json"), &phantom.truth).map_err(Failure::invalid)?;
    Ok(())
}

fn run_correct(a: CorrectArgs) -> Result<(), Failure> {
    let defaults = RunConfig::default();
    let mut config = RunConfig {
        lambda: a.lambda.unwrap_or(defaults.lambda),
        density_per_mm: a.density.unwrap_or(defaults.density_per_mm),
        learning_rate: a.lr,
        momentum: a.momentum.unwrap_or(defaults.momentum),
        max_iterations: a.max_iters.unwrap_or(defaults.max_iterations),
        threads: a.threads.unwrap_or(defaults.threads),
        depth_stride: a.depth_stride.unwrap_or(defaults.depth_stride),
        ..defaults
    };
    config.preprocess.t_min = a.t_min;
    if let Some(n) = a.noise_rows {
        config.preprocess.noise_rows = n;
    }
    let volumes = a.inputs.iter().map(|p| load(p)).collect::<Result<Vec<_>, _>>()?;
    let outcome = correct_volumes(volumes, &config).map_err(|e| match e {
        PipelineError::Diverged(_) => Failure {
            code: EXIT_DIVERGED,
            message: e.to_string(),
        },
        other => Failure::invalid(other),
    })?;
    for (n, v) in outcome.corrected.iter().enumerate() {
        write_volume(&a.out.join(format!("corrected_{n}")), v).map_err(Failure::invalid)?;
    }
    write_volume(&a.out.join("merged"), &outcome.merged).map_err(Failure::invalid)?;
    write_corrections(&a.out.join("corrections.json"), &outcome.fields).map_err(Failure::invalid)?;
    write_trace(&a.out, &outcome.trace, config.log_every).map_err(Failure::invalid)?;
    Ok(())
}

fn run_enface(a: EnfaceArgs) -> Result<(), Failure> {
    let volume = load(&a.input)?;
    let overlap = match &a.overlap {
        None => None,
        Some(p) => {
            let o = load(p)?;
            if o.n_bscans() == volume.n_bscans() && o.n_ascans() == volume.n_ascans() && o.direction() == volume.direction() {
                Some(o)
            } else {
                let g = RegisteredGeometry::between(volume.direction(), o.direction());
                Some(resample_onto(&o, &g, volume.dims(), &volume).map_err(context("--overlap"))?)
            }
        }
    };
    let image = enface(&volume, overlap.as_ref()).map_err(Failure::invalid)?;
    write_enface(&a.out, &image).map_err(Failure::invalid)
}

fn run_evaluate(a: EvaluateArgs) -> Result<(), Failure> {
    let before = a.before.iter().map(|p| load(p)).collect::<Result<Vec<_>, _>>()?;
    let after = a.after.iter().map(|p| load(p)).collect::<Result<Vec<_>, _>>()?;
    let truth = match &a.truth {
        None => None,
        Some(p) => {
            let file = read_truth(p).map_err(Failure::invalid)?;
            Some(file.log_illumination().map_err(context(p.display()))?)
        }
    };
    let report = evaluate_pair(&before, &after, truth.as_ref()).map_err(Failure::invalid)?;
    write_json_file(&a.out, &report).map_err(Failure::invalid)?;
    println!(
        "MAD before {:.6} after {:.6} reduction {:.2}%",
        report.mad_before, report.mad_after, report.reduction_percent
    );
    Ok(())
}
