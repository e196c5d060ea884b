use std::path::Path;

use ddpseg::costmodel::{softmax_z, CostVolume, LogitVolume};
use ddpseg::dynprog::{hard_dp_solve, SmoothnessSpec};
use ddpseg::evalloss::{loss_l1, loss_mce, metrics, GroundTruth};
use ddpseg::fit::estimate_delta;
use ddpseg::gradients::backward;
use ddpseg::imageio::{format_surfaces, gradient_channels, parse_surfaces, BScan, Channel};
use ddpseg::phantom::{generate, PhantomSpec};
use ddpseg::softdp::{logsumexp_window, segment, segment_with_state, soft_forward};
use ddpseg::{Grid3, Surfaces};
use proptest::prelude::*;

/// `(surfaces, width, depth, values)` with values in `[lo, hi)`.
fn volume(
    n: std::ops::RangeInclusive<usize>,
    x: std::ops::RangeInclusive<usize>,
    z: std::ops::RangeInclusive<usize>,
    lo: f64,
    hi: f64,
) -> impl Strategy<Value = Grid3> {
    (n, x, z).prop_flat_map(move |(n, x, z)| {
        prop::collection::vec(lo..hi, n * x * z)
            .prop_map(move |d| Grid3::from_vec(n, x, z, d).unwrap())
    })
}

fn costs(g: Grid3) -> CostVolume {
    CostVolume::new(g).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lse_lies_between_max_and_max_plus_log_count(
        v in prop::collection::vec(-50.0f64..50.0, 1..12),
        t in 0.01f64..200.0,
        a in 0usize..12,
        b in 0usize..12,
    ) {
        let (lo, hi) = (a.min(b).min(v.len() - 1), a.max(b).min(v.len() - 1));
        let m = v[lo..=hi].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let phi = logsumexp_window(&v, lo, hi, t).unwrap();
        prop_assert!(m <= phi + 1e-12);
        prop_assert!(phi <= m + (((hi - lo + 1) as f64).ln()) / t + 1e-12);
    }

    #[test]
    fn hard_path_ignores_per_column_offsets(
        g in volume(1..=2, 2..=7, 2..=6, -3.0, 3.0),
        offsets in prop::collection::vec(-100i32..100, 7),
        delta in 0usize..3,
    ) {
        let (n, width, depth) = g.dims();
        let spec = SmoothnessSpec::uniform(n, width, delta, 1.0).unwrap();
        // integer costs and offsets keep every total exact
        let g = Grid3::from_vec(n, width, depth, g.as_slice().iter().map(|v| v.round()).collect()).unwrap();
        let base = hard_dp_solve(&costs(g.clone()), &spec).unwrap();
        let shifted = Grid3::from_fn(n, width, depth, |i, x, z| g.get(i, x, z) + offsets[x] as f64);
        let moved = hard_dp_solve(&costs(shifted), &spec).unwrap();
        prop_assert_eq!(&moved.path, &base.path);
        let sum: f64 = offsets[..width].iter().map(|&o| o as f64).sum();
        for (a, b) in moved.totals.iter().zip(&base.totals) {
            prop_assert_eq!(*a, b + sum);
        }
        prop_assert!(spec.admits(&base.to_surfaces(), 0.0));
    }

    #[test]
    fn soft_positions_ignore_per_column_offsets(
        g in volume(1..=2, 2..=6, 2..=8, -2.0, 2.0),
        offsets in prop::collection::vec(-5.0f64..5.0, 6),
        t in 0.5f64..20.0,
    ) {
        let (n, width, depth) = g.dims();
        let spec = SmoothnessSpec::uniform(n, width, 1, t).unwrap();
        let a = segment(&costs(g.clone()), &spec).unwrap();
        let shifted = Grid3::from_fn(n, width, depth, |i, x, z| g.get(i, x, z) + offsets[x]);
        let b = segment(&costs(shifted), &spec).unwrap();
        for (p, q) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((p - q).abs() < 1e-9, "{p} vs {q}");
        }
    }

    #[test]
    fn cost_gradient_columns_sum_to_zero(
        g in volume(1..=2, 2..=6, 2..=8, -2.0, 2.0),
        dz in prop::collection::vec(-1.0f64..1.0, 12),
        t in 0.5f64..20.0,
    ) {
        let (n, width, _) = g.dims();
        let spec = SmoothnessSpec::uniform(n, width, 1, t).unwrap();
        let (_, state) = segment_with_state(&costs(g), &spec).unwrap();
        let d = Surfaces::from_vec(n, width, dz[..n * width].to_vec()).unwrap();
        let grad = backward(&state, &d).unwrap();
        for i in 0..n {
            for x in 0..width {
                let s: f64 = grad.d_cost.column(i, x).iter().sum();
                prop_assert!(s.abs() < 1e-9, "column ({i},{x}) sums to {s}");
            }
        }
    }

    #[test]
    fn smoothed_optimum_decreases_toward_hard_optimum_as_t_grows(
        g in volume(1..=1, 2..=6, 2..=6, -3.0, 3.0),
        t in 0.1f64..10.0,
        factor in 1.0f64..10.0,
        delta in 0usize..3,
    ) {
        let (n, width, _) = g.dims();
        let c = costs(g);
        let hard = hard_dp_solve(&c, &SmoothnessSpec::uniform(n, width, delta, 1.0).unwrap()).unwrap();
        let lo = soft_forward(&c, &SmoothnessSpec::uniform(n, width, delta, t).unwrap()).unwrap();
        let hi = soft_forward(&c, &SmoothnessSpec::uniform(n, width, delta, t * factor).unwrap()).unwrap();
        let (a, b) = (lo.soft_totals()[0], hi.soft_totals()[0]);
        prop_assert!(b <= a + 1e-9);
        prop_assert!(hard.totals[0] <= b + 1e-9);
    }

    #[test]
    fn rounded_soft_output_respects_delta_plus_one(
        g in volume(1..=3, 2..=10, 3..=12, -5.0, 5.0),
        delta in 0usize..4,
        eps in 1e-4f64..2.0,
    ) {
        let (n, width, _) = g.dims();
        let mut spec = SmoothnessSpec::uniform(n, width, delta, 1.0).unwrap();
        spec.set_epsilon(eps).unwrap();
        let out = segment(&costs(g), &spec).unwrap();
        prop_assert!(spec.admits(&out.rounded(), 1.0));
    }

    #[test]
    fn softmax_ignores_column_offsets(
        g in volume(1..=2, 1..=4, 2..=8, -10.0, 10.0),
        offset in -50.0f64..50.0,
    ) {
        let (n, width, depth) = g.dims();
        let shifted = Grid3::from_fn(n, width, depth, |i, x, z| g.get(i, x, z) + offset);
        let a = softmax_z(&LogitVolume::new(g).unwrap());
        let b = softmax_z(&LogitVolume::new(shifted).unwrap());
        for (p, q) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn l1_is_a_metric(
        rows in prop::collection::vec(prop::collection::vec(0.0f64..20.0, 5), 3),
    ) {
        let s = |r: &Vec<f64>| Surfaces::from_rows(std::slice::from_ref(r)).unwrap();
        let gt = |r: &Vec<f64>| GroundTruth::new(s(r), 21).unwrap();
        let (a, b, c) = (&rows[0], &rows[1], &rows[2]);
        let ab = loss_l1(&s(a), &gt(b)).unwrap();
        prop_assert_eq!(ab, loss_l1(&s(b), &gt(a)).unwrap());
        prop_assert_eq!(loss_l1(&s(a), &gt(a)).unwrap(), 0.0);
        let ac = loss_l1(&s(a), &gt(c)).unwrap();
        let bc = loss_l1(&s(b), &gt(c)).unwrap();
        prop_assert!(ac <= ab + bc + 1e-12);
    }

    #[test]
    fn mce_is_nonnegative(
        g in volume(1..=2, 1..=4, 2..=6, 0.0, 1.0),
        s in prop::collection::vec(0.0f64..5.0, 8),
    ) {
        let (n, width, _) = g.dims();
        let gt = GroundTruth::new(Surfaces::from_vec(n, width, s[..n * width].to_vec()).unwrap(), 6).unwrap();
        let g = Grid3::from_fn(n, width, 6, |i, x, z| g.get(i, x, z.min(g.depth() - 1)));
        prop_assert!(loss_mce(&g, &gt).unwrap() >= 0.0);
    }

    #[test]
    fn metrics_follow_surface_relabeling(
        pred in prop::collection::vec(0.0f64..30.0, 3 * 6),
        truth in prop::collection::vec(0.0f64..30.0, 3 * 6),
    ) {
        let perm = [2usize, 0, 1];
        let permute = |v: &[f64]| -> Vec<f64> {
            perm.iter().flat_map(|&i| v[i * 6..(i + 1) * 6].to_vec()).collect()
        };
        let report = |p: Vec<f64>, t: Vec<f64>| {
            let gt = GroundTruth::new(Surfaces::from_vec(3, 6, t).unwrap(), 31).unwrap();
            metrics(&Surfaces::from_vec(3, 6, p).unwrap(), &gt, 3.24).unwrap()
        };
        let a = report(pred.clone(), truth.clone());
        let b = report(permute(&pred), permute(&truth));
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(&b.surfaces[k], &a.surfaces[i]);
        }
        prop_assert!((a.mean.masd_px - b.mean.masd_px).abs() < 1e-12);
        for s in &a.surfaces {
            prop_assert!(s.hd95_px <= s.hd_px && s.masd_px <= s.hd_px);
        }
    }

    #[test]
    fn gradient_channels_ignore_intensity_offsets(
        (w, d, levels) in (2usize..8, 2usize..8).prop_flat_map(|(w, d)| {
            (Just(w), Just(d), prop::collection::vec(0u32..512, w * d))
        }),
        offset in 0u32..512,
    ) {
        // dyadic intensities keep every sum and difference exact
        let a = BScan::from_fn(w, d, |x, z| levels[x * d + z] as f64 / 1024.0).unwrap();
        let b = BScan::from_fn(w, d, |x, z| (levels[x * d + z] + offset) as f64 / 1024.0).unwrap();
        let (ga, gb) = (gradient_channels(&a), gradient_channels(&b));
        prop_assert_eq!((gb.width(), gb.depth()), (w, d));
        for c in Channel::ALL.into_iter().filter(|&c| c != Channel::Raw) {
            prop_assert_eq!(ga.channel(c), gb.channel(c), "{:?}", c);
        }
    }

    #[test]
    fn surface_csv_round_trips_bit_exactly(
        v in prop::collection::vec(0.0f64..100.0, 1..40),
        n in 1usize..4,
    ) {
        let width = v.len().div_ceil(n);
        let mut data = v.clone();
        data.resize(n * width, 0.5);
        let s = Surfaces::from_vec(n, width, data).unwrap();
        let back = parse_surfaces(&format_surfaces(&s), Path::new("mem"), Some(101)).unwrap();
        prop_assert_eq!(back, s);
    }

    #[test]
    fn delta_estimate_grows_with_alpha(
        rows in prop::collection::vec(prop::collection::vec(0.0f64..20.0, 6), 1..4),
        a in 0.01f64..5.0,
        extra in 0.0f64..5.0,
    ) {
        let training: Vec<GroundTruth> = rows
            .iter()
            .map(|r| GroundTruth::new(Surfaces::from_rows(std::slice::from_ref(r)).unwrap(), 21).unwrap())
            .collect();
        let lo = estimate_delta(&training, a, 0.1).unwrap();
        let hi = estimate_delta(&training, a + extra, 0.1).unwrap();
        for (x, y) in lo.deltas_of(0).iter().zip(hi.deltas_of(0)) {
            prop_assert!(x <= y);
        }
        for gt in &training {
            prop_assert!(lo.admits(gt.positions(), 0.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn phantoms_are_ordered_and_within_their_step_bound(
        seed in any::<u64>(),
        n in 1usize..4,
        amp in 0.0f64..8.0,
        wavelength in 6.0f64..80.0,
        noise in 0.0f64..0.2,
    ) {
        let mut spec = PhantomSpec::layered(40, 48, n, seed).with_amplitude(amp).with_noise(noise);
        spec.wavelength = vec![wavelength; n];
        let p = generate(&spec).unwrap();
        let s = p.truth.positions();
        for x in 0..40 {
            for i in 1..n {
                prop_assert!(s.get(i, x) >= s.get(i - 1, x) + spec.min_gap - 1e-9);
            }
        }
        let alpha = 0.5;
        let est = estimate_delta(std::slice::from_ref(&p.truth), alpha, 0.1).unwrap();
        for i in 0..n {
            let bound = (p.step_bounds[i] as f64 + alpha).ceil() as usize;
            prop_assert!(est.max_delta(i) <= bound);
        }
        prop_assert!(p.image.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
