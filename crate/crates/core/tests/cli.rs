//! Command-line and file-format round trips.

use std::fs;
use std::path::{Path, PathBuf};

use octillum::cli::{cli_main, EXIT_DIVERGED, EXIT_INVALID, EXIT_OK};
use octillum::io::{read_corrections, read_volume, write_volume, IoError};
use octillum::metrics::EvaluationReport;
use octillum::pipeline::{apply_fields, build_problem, RunConfig};

fn run(args: &[&str]) -> i32 {
    cli_main(std::iter::once("octillum").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a small phantom pair under `root/phantom` and returns its two scans.
fn phantom(root: &Path) -> (PathBuf, PathBuf) {
    let out = root.join("phantom");
    let args = ["phantom", "--out", s(&out), "--seed", "2", "--size", "32", "24", "32"];
    assert_eq!(run(&args), EXIT_OK);
    (out.join("x-fast"), out.join("y-fast"))
}

fn correct(x: &Path, y: &Path, out: &Path, extra: &[&str]) -> i32 {
    let mut args = vec!["correct", "--inputs", s(x), s(y), "--out", s(out)];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn phantom_writes_consistent_file_sets() {
    let tmp = tempfile::tempdir().unwrap();
    let (x, y) = phantom(tmp.path());
    let vx = read_volume(&x).unwrap();
    let vy = read_volume(&y).unwrap();
    assert_eq!(vx.dims(), [24, 32, 32]);
    assert_eq!(vy.dims(), [32, 24, 32]);
    for dir in [&x, &y] {
        assert_eq!(fs::metadata(dir.join("data.raw")).unwrap().len(), 4 * 24 * 32 * 32);
        assert_eq!(fs::metadata(dir.join("validity.raw")).unwrap().len(), 24 * 32 * 32);
    }
    let truth: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("phantom/truth.json")).unwrap()).unwrap();
    assert!(truth.get("log_illumination_x_fast").is_some());
}

#[test]
fn correct_outputs_and_corrections_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let (x, y) = phantom(tmp.path());
    let out = tmp.path().join("out");
    assert_eq!(correct(&x, &y, &out, &[]), EXIT_OK);
    for f in ["corrections.json", "trace.log", "summary.json", "merged/meta.json", "corrected_0/data.raw", "corrected_1/data.raw"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }

    // re-applying the stored fields reproduces the written volumes bit for bit
    let fields = read_corrections(&out.join("corrections.json")).unwrap();
    let inputs = vec![read_volume(&x).unwrap(), read_volume(&y).unwrap()];
    let problem = build_problem(inputs, &RunConfig::default()).unwrap();
    let again = apply_fields(&problem, &fields).unwrap();
    for (n, v) in again.iter().enumerate() {
        let dir = tmp.path().join(format!("again_{n}"));
        write_volume(&dir, v).unwrap();
        let written = out.join(format!("corrected_{n}"));
        assert_eq!(fs::read(dir.join("data.raw")).unwrap(), fs::read(written.join("data.raw")).unwrap());
        assert_eq!(fs::read(dir.join("validity.raw")).unwrap(), fs::read(written.join("validity.raw")).unwrap());
    }
}

#[test]
fn enface_and_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let (x, y) = phantom(tmp.path());
    let out = tmp.path().join("out");
    assert_eq!(correct(&x, &y, &out, &[]), EXIT_OK);

    let pgm = tmp.path().join("x.pgm");
    assert_eq!(run(&["enface", "--input", s(&x), "--overlap", s(&y), "--out", s(&pgm)]), EXIT_OK);
    let bytes = fs::read(&pgm).unwrap();
    let header = b"P5\n32 24\n65535\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(bytes.len(), header.len() + 2 * 32 * 24);

    let csv = tmp.path().join("merged.csv");
    assert_eq!(run(&["enface", "--input", s(&out.join("merged")), "--out", s(&csv)]), EXIT_OK);
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 24);
    assert!(text.lines().all(|l| l.split(',').count() == 32));

    let report_path = tmp.path().join("report.json");
    let truth = tmp.path().join("phantom/truth.json");
    let code = run(&[
        "evaluate",
        "--before",
        s(&x),
        s(&y),
        "--after",
        s(&out.join("corrected_0")),
        s(&out.join("corrected_1")),
        "--truth",
        s(&truth),
        "--out",
        s(&report_path),
    ]);
    assert_eq!(code, EXIT_OK);
    let report: EvaluationReport = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert!(report.decreased);
    assert!(report.reduction_percent > 20.0);
    assert!(report.illum_rmse_after.unwrap() < report.illum_rmse_before.unwrap());
}

#[test]
fn divergence_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let (x, y) = phantom(tmp.path());
    let out = tmp.path().join("out");
    assert_eq!(correct(&x, &y, &out, &["--lr", "1e200", "--max-iters", "20"]), EXIT_DIVERGED);
}

#[test]
fn invalid_input_exits_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing");
    let out = tmp.path().join("out");
    assert_eq!(correct(&missing, &missing, &out, &[]), EXIT_INVALID);
    assert_eq!(run(&["phantom", "--out", s(&out), "--seed", "1", "--size", "4", "4", "4"]), EXIT_INVALID);
    assert_eq!(run(&["correct", "--inputs", s(&missing)]), EXIT_INVALID);
    assert_eq!(run(&["frobnicate"]), EXIT_INVALID);
    assert_eq!(run(&["--help"]), EXIT_OK);

    // two scans in the same direction have no orthogonal partner
    let (x, _) = phantom(tmp.path());
    assert_eq!(correct(&x, &x, &out, &[]), EXIT_INVALID);
}

#[test]
fn unwritable_destination_is_an_io_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let (x, y) = phantom(tmp.path());
    // a regular file where a directory is needed cannot be written even as root
    let blocker = tmp.path().join("blocker");
    fs::write(&blocker, b"").unwrap();
    let volume = read_volume(&x).unwrap();
    assert!(matches!(write_volume(&blocker.join("vol"), &volume), Err(IoError::IoFailure { .. })));
    assert_eq!(correct(&x, &y, &blocker.join("out"), &["--max-iters", "3"]), EXIT_INVALID);
}

#[test]
fn shallow_volumes_need_fewer_noise_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("phantom");
    assert_eq!(run(&["phantom", "--out", s(&dir), "--seed", "5", "--size", "24", "24", "16"]), EXIT_OK);
    let (x, y) = (dir.join("x-fast"), dir.join("y-fast"));
    let out = tmp.path().join("out");
    // the default 20-row noise band does not fit in 16 samples
    assert_eq!(correct(&x, &y, &out, &[]), EXIT_INVALID);
    assert_eq!(correct(&x, &y, &out, &["--noise-rows", "8"]), EXIT_OK);
}
