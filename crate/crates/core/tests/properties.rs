//! Property tests over the public API.

use ndarray::{Array2, Array3};
use proptest::prelude::*;

use octillum::correction::{merge_volumes, EnfaceImage};
use octillum::metrics::{illumination_recovery_error, mad_between_enfaces, reduction_percent};
use octillum::objective::{
    constraint_value, project_constraint, CorrectionProblem, ObjectiveSettings, ProblemVolume,
};
use octillum::preprocess::{compute_foreground_mask, log_transform, ForegroundMask};
use octillum::resample::{interpolate, interpolation_weights, SampleResult};
use octillum::spline::{CorrectionField, CorrectionSet, KnotLayout};
use octillum::volume::{RasterVolume, ScanDirection, Spacing};

fn spacing() -> Spacing {
    Spacing::new(0.25, 2.0)
}

/// Layout over `n_ascans` A-scans with `knots` uniform knots.
fn layout(n_ascans: usize, knots: usize) -> KnotLayout {
    let step = (n_ascans - 1) as f64 / (knots - 1) as f64;
    let positions: Vec<f64> = (0..knots).map(|m| m as f64 * step).collect();
    KnotLayout::from_positions(positions, n_ascans, 0.25).unwrap()
}

fn volume_strategy(max: usize) -> impl Strategy<Value = (usize, usize, usize, Vec<f64>)> {
    (2..=max, 2..=max, 1..=max).prop_flat_map(|(a, b, c)| {
        (
            Just(a),
            Just(b),
            Just(c),
            prop::collection::vec(0.01f64..10.0, a * b * c),
        )
    })
}

fn enface_pair() -> impl Strategy<Value = (EnfaceImage, EnfaceImage)> {
    (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
        let n = h * w;
        (
            prop::collection::vec(0.0f64..5.0, n),
            prop::collection::vec(0.0f64..5.0, n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_map(move |(a, b, cov)| {
                let covered = Array2::from_shape_vec((h, w), cov).unwrap();
                (
                    EnfaceImage {
                        values: Array2::from_shape_vec((h, w), a).unwrap(),
                        covered: covered.clone(),
                    },
                    EnfaceImage {
                        values: Array2::from_shape_vec((h, w), b).unwrap(),
                        covered,
                    },
                )
            })
    })
}

fn problem_volume(data: Array3<f64>, dir: ScanDirection, valid: Array2<bool>) -> ProblemVolume {
    let v = RasterVolume::from_ascan_validity(data, dir, spacing(), valid).unwrap();
    let log = log_transform(&v, 1e-6).unwrap();
    let mask = ForegroundMask::from_array(&v, v.validity(), 0.0);
    let lay = layout(v.n_ascans(), 3);
    ProblemVolume::new(v, log, mask, lay).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn volume_voxels_round_trip((a, b, c, values) in volume_strategy(6)) {
        let data = Array3::from_shape_vec((a, b, c), values.clone()).unwrap();
        let v = RasterVolume::fully_valid(data, ScanDirection::XFast, spacing()).unwrap();
        for (n, (i, j, k)) in (0..a).flat_map(|i| (0..b).flat_map(move |j| (0..c).map(move |k| (i, j, k)))).enumerate() {
            prop_assert_eq!(v.get(i, j, k).to_bits(), values[n].to_bits());
        }
    }

    #[test]
    fn log_of_exp_is_identity(values in prop::collection::vec(-5.0f64..5.0, 1..50)) {
        let n = values.len();
        let data = Array3::from_shape_vec((1, n, 1), values.iter().map(|x| x.exp()).collect()).unwrap();
        let v = RasterVolume::fully_valid(data, ScanDirection::XFast, spacing()).unwrap();
        let log = log_transform(&v, 1e-300).unwrap();
        for (j, x) in values.iter().enumerate() {
            let back = log.get(0, j, 0);
            prop_assert!((back - x).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn mask_is_idempotent_and_antitone((a, b, c, values) in volume_strategy(5), t1 in 0.0f64..10.0, t2 in 0.0f64..10.0) {
        let data = Array3::from_shape_vec((a, b, c), values).unwrap();
        let v = RasterVolume::fully_valid(data, ScanDirection::YFast, spacing()).unwrap();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let m_lo = compute_foreground_mask(&v, lo);
        let again = compute_foreground_mask(&v, lo);
        prop_assert_eq!(m_lo.mask(), again.mask());
        let m_hi = compute_foreground_mask(&v, hi);
        for (h, l) in m_hi.mask().iter().zip(m_lo.mask()) {
            prop_assert!(!*h || *l);
        }
    }

    #[test]
    fn spline_is_linear_in_controls(
        n_ascans in 2usize..40,
        knots in 2usize..8,
        c1 in prop::collection::vec(-2.0f64..2.0, 8),
        c2 in prop::collection::vec(-2.0f64..2.0, 8),
        alpha in -3.0f64..3.0,
        beta in -3.0f64..3.0,
    ) {
        let knots = knots.min(n_ascans);
        let lay = layout(n_ascans, knots);
        let (c1, c2) = (&c1[..knots], &c2[..knots]);
        let mix: Vec<f64> = c1.iter().zip(c2).map(|(a, b)| alpha * a + beta * b).collect();
        for j in 0..n_ascans {
            let x = j as f64;
            let lhs = lay.eval(&mix, x).unwrap();
            let rhs = alpha * lay.eval(c1, x).unwrap() + beta * lay.eval(c2, x).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-12);
            let w = lay.basis_weights(x).unwrap();
            prop_assert!((w.dot(c1) - lay.eval(c1, x).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn spline_overshoot_is_bounded(n_ascans in 2usize..60, knots in 2usize..10, c in prop::collection::vec(-1.0f64..1.0, 10)) {
        // Catmull-Rom segments stay within the control range widened by a
        // quarter of the largest neighbouring control difference
        let knots = knots.min(n_ascans);
        let lay = layout(n_ascans, knots);
        let c = &c[..knots];
        let lo = c.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let slack = 0.25 * c.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
        for j in 0..n_ascans {
            let v = lay.eval(c, j as f64).unwrap();
            prop_assert!(v >= lo - slack - 1e-12 && v <= hi + slack + 1e-12, "{v} outside [{lo}, {hi}] +/- {slack}");
        }
    }

    #[test]
    fn projection_is_idempotent_and_zero_sum(values in prop::collection::vec(-5.0f64..5.0, 2..40)) {
        let n = values.len();
        let lay = layout(n, 2);
        let field = CorrectionField { layout: lay, values: Array2::from_shape_vec((n / 2, 2), values[..n / 2 * 2].to_vec()).unwrap() };
        let set = CorrectionSet::new(vec![field]);
        let once = project_constraint(&set);
        let twice = project_constraint(&once);
        prop_assert!(constraint_value(&once).abs() < 1e-12 * set.len() as f64);
        for (a, b) in once.to_flat().iter().zip(twice.to_flat()) {
            prop_assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn mad_is_a_metric_on_the_covered_domain((e1, e2) in enface_pair()) {
        let d12 = mad_between_enfaces(&e1, &e2);
        let d21 = mad_between_enfaces(&e2, &e1);
        match (d12, d21) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(a, b);
                prop_assert!(a >= 0.0);
                prop_assert_eq!(mad_between_enfaces(&e1, &e1).unwrap(), 0.0);
                let equal = e1.values.iter().zip(&e2.values).zip(&e1.covered).all(|((x, y), c)| !c || x == y);
                prop_assert_eq!(a == 0.0, equal);
            }
            (Err(_), Err(_)) => prop_assert!(e1.covered.iter().all(|c| !c)),
            _ => prop_assert!(false, "asymmetric result"),
        }
    }

    #[test]
    fn reduction_is_scale_invariant(before in 0.01f64..10.0, after in 0.0f64..10.0, s in 0.01f64..100.0) {
        let r = reduction_percent(before, after);
        let rs = reduction_percent(s * before, s * after);
        prop_assert!((r - rs).abs() < 1e-9 * r.abs().max(1.0));
    }

    #[test]
    fn recovery_error_ignores_a_global_constant(
        c in prop::collection::vec(-1.0f64..1.0, 12),
        t in prop::collection::vec(-1.0f64..1.0, 12),
        fg in prop::collection::vec(any::<bool>(), 12),
        k in -5.0f64..5.0,
    ) {
        prop_assume!(fg.iter().any(|&f| f));
        let c = Array2::from_shape_vec((3, 4), c).unwrap();
        let t = Array2::from_shape_vec((3, 4), t).unwrap();
        let fg = vec![Array2::from_shape_vec((3, 4), fg).unwrap()];
        let e = illumination_recovery_error(std::slice::from_ref(&c), Some(&[&t]), &fg).unwrap();
        let shifted = illumination_recovery_error(&[c.mapv(|v| v + k)], Some(&[&t]), &fg).unwrap();
        prop_assert!((e - shifted).abs() < 1e-12);
    }

    #[test]
    fn interpolation_never_reads_invalid_ascans(
        (a, b, c, values) in volume_strategy(5),
        valid in prop::collection::vec(any::<bool>(), 25),
        u in 0.0f64..1.0, v in 0.0f64..1.0, w in 0.0f64..1.0,
    ) {
        let data = Array3::from_shape_vec((a, b, c), values).unwrap();
        let valid = Array2::from_shape_fn((a, b), |(i, j)| valid[i * 5 + j]);
        let coord = [u * (a - 1) as f64, v * (b - 1) as f64, w * (c - 1) as f64];
        if let SampleResult::Value(_) = interpolate(&data, &valid, coord) {
            let stencil = interpolation_weights(coord, [a, b, c]).unwrap();
            for (i, j, _, weight) in stencil.iter() {
                prop_assert!(weight == 0.0 || valid[[i, j]]);
            }
        }
    }

    #[test]
    fn adding_gaps_never_adds_residuals(
        gaps_a in prop::collection::vec(any::<bool>(), 16),
        gaps_b in prop::collection::vec(any::<bool>(), 16),
    ) {
        let x = Array3::from_shape_fn((4, 4, 2), |(i, j, k)| 1.0 + (i * 4 + j + k) as f64);
        let y = Array3::from_shape_fn((4, 4, 2), |(i, j, k)| 1.5 + (i + j * 3 + k) as f64);
        let fewer = Array2::from_shape_fn((4, 4), |(i, j)| !gaps_a[i * 4 + j]);
        let more = Array2::from_shape_fn((4, 4), |(i, j)| fewer[[i, j]] && !gaps_b[i * 4 + j]);
        let count = |valid: Array2<bool>| {
            CorrectionProblem::new(
                vec![
                    problem_volume(x.clone(), ScanDirection::XFast, Array2::from_elem((4, 4), true)),
                    problem_volume(y.clone(), ScanDirection::YFast, valid),
                ],
                ObjectiveSettings::default(),
            )
            .unwrap()
            .residual_count()
        };
        prop_assert!(count(more) <= count(fewer));
    }

    #[test]
    fn objective_ignores_constants_after_projection(
        c in prop::collection::vec(-0.5f64..0.5, 24),
        k in -2.0f64..2.0,
    ) {
        let x = Array3::from_shape_fn((4, 4, 2), |(i, j, k)| 1.0 + 0.2 * ((i * 5 + j * 3 + k) % 7) as f64);
        let y = Array3::from_shape_fn((4, 4, 2), |(i, j, k)| 0.8 + 0.3 * ((i * 2 + j * 5 + k) % 5) as f64);
        let p = CorrectionProblem::new(
            vec![
                problem_volume(x, ScanDirection::XFast, Array2::from_elem((4, 4), true)),
                problem_volume(y, ScanDirection::YFast, Array2::from_elem((4, 4), true)),
            ],
            ObjectiveSettings::default(),
        )
        .unwrap();
        let base = p.zero_fields().with_flat(&c);
        let shifted = p.zero_fields().with_flat(&c.iter().map(|v| v + k).collect::<Vec<_>>());
        let a = p.evaluate(&project_constraint(&base)).unwrap().total;
        let b = p.evaluate(&project_constraint(&shifted)).unwrap().total;
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-12));
    }

    #[test]
    fn merge_is_idempotent_and_order_invariant((a, b, c, values) in volume_strategy(5), scale in 0.5f64..2.0) {
        let data = Array3::from_shape_vec((a, b, c), values).unwrap();
        let x = RasterVolume::fully_valid(data.clone(), ScanDirection::XFast, spacing()).unwrap();
        let merged = merge_volumes(std::slice::from_ref(&x), None).unwrap();
        prop_assert_eq!(merged.data(), x.data());
        let y = RasterVolume::fully_valid(
            data.mapv(|v| v * scale).permuted_axes([1, 0, 2]).as_standard_layout().into_owned(),
            ScanDirection::YFast,
            spacing(),
        )
        .unwrap();
        let xy = merge_volumes(&[x.clone(), y.clone()], None).unwrap();
        let yx = merge_volumes(&[y, x], None).unwrap();
        let yx_t = yx.data().clone().permuted_axes([1, 0, 2]);
        for (p, q) in xy.data().iter().zip(yx_t.as_standard_layout().iter()) {
            prop_assert!((p - q).abs() <= 1e-12 * p.abs().max(1.0));
        }
    }
}
