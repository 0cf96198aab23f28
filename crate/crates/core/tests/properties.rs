use fpdetect::affine::{affine_add, affine_scale, AffineForm};
use fpdetect::bench::{all_ids, build_benchmark};
use fpdetect::coeffs::unroll_coefficients;
use fpdetect::dd::ExtendedFloat;
use fpdetect::error_model::{combine, detector_precision, direct_abs_bound, iterated_abs_bound, PathSums};
use fpdetect::float::{ulp, FloatModel};
use fpdetect::interval::{sum, Interval};
use fpdetect::runtime::{detector_check, threshold, DetectorInstance, Verdict};
use fpdetect::stencil::{run_iterated, step_iterated, BoundaryCondition, GridState, PairTerms, StencilSpec};
use fpdetect::synthesis::{build_support, essential_width, offline_profile, protected_width, EssentialWidth, RowFeed};
use proptest::prelude::*;

/// Symmetric positive stencil of radius one with coefficients `k / 2^shift`.
fn dyadic_spec(dims: usize, n: i64, weights: &[u32], shift: i32, boundary: f64) -> StencilSpec {
    let scale = 2f64.powi(-shift);
    let mut offsets = vec![vec![0; dims]];
    let mut coeffs = vec![weights[0] as f64 * scale];
    for j in 0..dims {
        for s in [-1, 1] {
            let mut o = vec![0; dims];
            o[j] = s;
            offsets.push(o);
            coeffs.push(weights[1 + j] as f64 * scale);
        }
    }
    StencilSpec {
        dims,
        arrays: 1,
        lower: vec![0; dims],
        upper: vec![n - 1; dims],
        pairs: vec![PairTerms { to: 0, from: 0, offsets, coeffs }],
        boundary: BoundaryCondition::constant(vec![boundary]),
    }
}

/// Center weight and per-dimension neighbour weights over `2^shift` that sum to `2^shift`.
fn weights(dims: usize) -> impl Strategy<Value = (Vec<u32>, i32)> {
    (4i32..=8, proptest::collection::vec(1u32..=8, dims)).prop_map(move |(shift, side)| {
        let total = 1u32 << shift;
        let side: Vec<u32> = side.into_iter().map(|s| s.min(total / (2 * dims as u32 + 2))).collect();
        let center = total - 2 * side.iter().sum::<u32>();
        let mut w = vec![center];
        w.extend(side);
        (w, shift)
    })
}

fn star() -> impl Strategy<Value = (usize, Vec<u32>, i32)> {
    (1usize..=2).prop_flat_map(|d| weights(d).prop_map(move |(w, shift)| (d, w, shift)))
}

fn ids() -> Vec<String> {
    all_ids()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn constant_grids_are_conserved((dims, w, shift) in star(), m in 1u32..4096, steps in 0u64..20) {
        let c = m as f64 / 1024.0;
        let spec = dyadic_spec(dims, 12, &w, shift, c);
        let mut g = GridState::from_fn(&spec, |_, _| c);
        run_iterated(&mut g, &spec, steps).unwrap();
        prop_assert!(g.data[0].iter().all(|&v| v == c));
    }

    #[test]
    fn steps_are_linear(
        dims in 1usize..=2,
        (w, shift) in weights(2),
        seed in any::<u64>(),
        a in 0.5f64..2.0,
        b in 0.5f64..2.0,
    ) {
        let spec = dyadic_spec(dims, 10, &w, shift, 0.0);
        let val = |k: u64, i: usize| 1.0 + ((seed.wrapping_mul(k).wrapping_add(i as u64 * 0x9e37_79b9)) % 1000) as f64 / 1000.0;
        let mut x = GridState::from_fn(&spec, |_, _| 0.0);
        let mut y = x.clone();
        for i in 0..x.len() {
            x.data[0][i] = val(3, i);
            y.data[0][i] = val(7, i);
        }
        let mut z = x.clone();
        for i in 0..z.len() {
            z.data[0][i] = a * x.data[0][i] + b * y.data[0][i];
        }
        for g in [&mut x, &mut y, &mut z] {
            step_iterated(g, &spec).unwrap();
        }
        for i in 0..z.len() {
            let want = a * x.data[0][i] + b * y.data[0][i];
            prop_assert!((z.data[0][i] - want).abs() <= 4.0 * ulp(want.abs().max(z.data[0][i].abs())));
        }
    }

    #[test]
    fn impulse_response_is_the_coefficient_row((dims, w, shift) in star(), t in 1usize..=8) {
        let n = 2 * t as i64 + 3;
        let spec = dyadic_spec(dims, n, &w, shift, 0.0);
        let center = vec![t as i64 + 1; dims];
        let mut g = GridState::from_fn(&spec, |_, p| if p == center.as_slice() { 1.0 } else { 0.0 });
        run_iterated(&mut g, &spec, t as u64).unwrap();
        let table = unroll_coefficients(&spec, t).unwrap();
        let row = table.row(t).unwrap();
        for idx in 0..g.len() {
            let p = g.coords(idx);
            let o: Vec<i32> = p.iter().zip(&center).map(|(a, b)| (a - b) as i32).collect();
            let want = if o.iter().all(|v| v.abs() <= t as i32) { row.get(0, 0, &o).to_f64() } else { 0.0 };
            let got = g.data[0][idx];
            prop_assert!((got - want).abs() <= 4.0 * ulp(want), "offset {o:?}: {got} vs {want}");
        }
    }

    #[test]
    fn benchmarks_are_stable_at_any_grid(i in 0usize..49, n in 8usize..200) {
        let id = &ids()[i];
        let n = if id.ends_with("-1d") || id == "heat1d" { n * 4 } else { n };
        let bench = build_benchmark(id, n).unwrap();
        let spec = &bench.spec;
        prop_assert!(spec.check_stability().is_ok());
        prop_assert!(spec.lower.iter().zip(&spec.upper).all(|(l, u)| l < u));
        let w = spec.width();
        for pair in &spec.pairs {
            for o in &pair.offsets {
                prop_assert_eq!(o.len(), spec.dims);
                prop_assert!(o.iter().zip(&w).all(|(a, b)| a.abs() <= *b));
            }
            prop_assert!(pair.coeffs.iter().all(|c| c.abs() <= 1.0));
        }
        let mut g = bench.initial_state();
        run_iterated(&mut g, spec, 20).unwrap();
        prop_assert!(g.all_finite());
    }

    #[test]
    fn rows_match_the_stencil_and_keep_their_shape((dims, w, shift) in star(), tmax in 1usize..=10) {
        let spec = dyadic_spec(dims, 32, &w, shift, 0.0);
        let table = unroll_coefficients(&spec, tmax).unwrap();
        let first = table.row(1).unwrap();
        for (o, c) in spec.pairs[0].offsets.iter().zip(&spec.pairs[0].coeffs) {
            prop_assert_eq!(first.get(0, 0, o).to_f64(), *c);
        }
        for k in 1..=tmax {
            let row = table.row(k).unwrap();
            let block = row.block(0, 0).unwrap();
            prop_assert_eq!(block.len(), (2 * k + 1).pow(dims as u32));
            let total = block.iter().fold(ExtendedFloat::ZERO, |a, &c| a + c);
            prop_assert!((total - ExtendedFloat::from(1.0)).abs().to_f64() <= 2f64.powi(-104));
            for (idx, &c) in block.iter().enumerate() {
                let o = row.offset_of(idx);
                let mirror: Vec<i32> = o.iter().map(|v| -v).collect();
                prop_assert!(c == row.get(0, 0, &mirror), "asymmetric at {o:?}");
                prop_assert_eq!(!c.is_zero(), reachable(&o, k), "support at {:?}", o);
            }
        }
    }

    #[test]
    fn affine_cancellation(x in -1e3f64..1e3, alpha in -4.0f64..4.0) {
        let m = FloatModel::binary64();
        let a = affine_scale(&AffineForm::rounded_input(x, &m), alpha, &m);
        let d = affine_add(&a, &a.negate(), &m);
        for id in a.sigma() {
            prop_assert_eq!(d.gamma(id), 0.0);
        }
        let i = a.to_interval();
        prop_assert!(i.lo <= a.central - a.radius() && i.hi >= a.central + a.radius());
    }

    #[test]
    fn interval_sums_enclose_the_exact_sum(xs in proptest::collection::vec(-1e6f64..1e6, 1..40)) {
        let s = sum(&xs.iter().map(|&x| Interval::point(x)).collect::<Vec<_>>());
        prop_assert!(s.lo <= s.hi && s.lo.is_finite() && s.hi.is_finite());
        let exact = xs.iter().fold(ExtendedFloat::ZERO, |a, &x| a + ExtendedFloat::from(x));
        prop_assert!(ExtendedFloat::from(s.lo) <= exact && exact <= ExtendedFloat::from(s.hi));
    }

    #[test]
    fn representable_values_round_trip(x in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
        prop_assert_eq!(ExtendedFloat::from(x).to_f64().to_bits(), x.to_bits());
    }

    #[test]
    fn detector_precision_is_clamped(rs in prop_oneof![Just(0.0), 0.0f64..1e30, Just(f64::INFINITY)], rd in 0.0f64..1e30) {
        let dp = detector_precision(rs, rd, &FloatModel::binary64());
        prop_assert!(dp <= 53);
    }

    #[test]
    fn verdict_is_a_threshold_test(pred in -4.0f64..4.0, delta in -1e-9f64..1e-9, e_top in -3i32..3, dp in 20u32..53) {
        let spec = dyadic_spec(1, 8, &[8, 4], 4, 0.0);
        let actual = pred + delta;
        let mut g = GridState::from_fn(&spec, |_, _| actual);
        g.time = 5;
        let thr = threshold(e_top, 0, dp);
        let det = DetectorInstance { id: 0, array: 0, position: vec![4], eval_t: 0, target_t: 5, predicted: pred, threshold: thr };
        let o = detector_check(&g, &det, 53).unwrap();
        prop_assert_eq!(o.verdict == Verdict::Detected, (pred - actual).abs() >= thr);
    }
}

/// Whether `k` steps of a star stencil with a positive center can reach offset `o`.
fn reachable(o: &[i32], k: usize) -> bool {
    o.iter().map(|v| v.unsigned_abs() as usize).sum::<usize>() <= k
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn supports_and_essential_widths_are_consistent(i in 0usize..49, t in 1usize..=12, w in 1u32..=6) {
        let bench = build_benchmark(&ids()[i], 64).unwrap();
        let spec = &bench.spec;
        let table = unroll_coefficients(spec, t).unwrap();
        let row = table.row(t).unwrap();
        for u in spec.detector_targets() {
            let s = build_support(row, u, w);
            for (p, part) in s.points.iter().zip(&s.partial) {
                prop_assert!((*p + *part).encloses(&s.total));
            }
            for dp in [1, 10, 30, 45, 53] {
                let ew = essential_width(row, u, w, dp);
                prop_assert!(ew.left.iter().zip(&row.radius).all(|(l, r)| *l >= 0 && l <= r));
                prop_assert!(ew.right.iter().zip(&row.radius).all(|(l, r)| *l >= 0 && l <= r));
            }
        }
    }

    #[test]
    fn precision_shrinks_and_protection_shrinks(i in 0usize..49, t in 2usize..=16, w in 1u32..=8, udp in 1u32..=30) {
        let bench = build_benchmark(&ids()[i], 64).unwrap();
        let spec = &bench.spec;
        let m = FloatModel::binary64();
        let table = unroll_coefficients(spec, t + 1).unwrap();
        let sums = PathSums::from_table(&table);
        let nonnegative = spec.pairs.iter().all(|p| p.coeffs.iter().all(|&c| c >= 0.0));
        for u in spec.detector_targets() {
            let rel = |k: usize, w: u32| {
                let e = sums.top_exponent(k, u, w)?;
                Some((combine(iterated_abs_bound(spec, &sums, u, k, w, &m), 0.0, e, &m), e))
            };
            let (Some((a, e)), Some((b, _)), Some((c, e_w))) = (rel(t, w), rel(t + 1, w), rel(t, w + 1)) else { continue };
            let te = |k: usize, w: u32| iterated_abs_bound(spec, &sums, u, k, w, &m);
            prop_assert!(te(t, w) <= te(t + 1, w), "absolute bound falls with T");
            prop_assert!(te(t, w) <= te(t, w + 1), "absolute bound falls with width");
            if nonnegative {
                prop_assert!(a.rs <= b.rs * (1.0 + 1e-12), "R_s falls with T: {} -> {}", a.rs, b.rs);
                prop_assert!(a.rs <= c.rs * (1.0 + 1e-12), "R_s falls with width: {} -> {}", a.rs, c.rs);
            }
            let pw = |udp: u32, dp: u32, e: i32| protected_width(spec, &table, u, t, t, dp, udp, e).map(|p| p[0]).unwrap_or(0);
            prop_assert!(pw(udp + 1, a.dp, e) <= pw(udp, a.dp, e));
            prop_assert!(pw(udp, c.dp, e_w) <= pw(udp, a.dp, e));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn configs_stay_valid_at_narrower_widths(i in 0usize..49, top in 2u32..=8) {
        let id = &ids()[i];
        let bench = build_benchmark(id, if id.ends_with("-1d") { 512 } else { 64 }).unwrap();
        let spec = &bench.spec;
        let m = FloatModel::binary64();
        let tmax = 24;
        let table = unroll_coefficients(spec, tmax).unwrap();
        let sums = PathSums::from_table(&table);
        let lut = offline_profile(spec, RowFeed::Table(&table), tmax, &[top], &[4], &[50], &m).unwrap();
        let Some(cfg) = lut.cell(top, 4, 50) else { return Ok(()) };
        let row = table.row(cfg.t).unwrap();
        let ew: EssentialWidth = cfg.ew();
        for (ti, u) in spec.detector_targets().into_iter().enumerate() {
            let thr = threshold(cfg.e_top[ti], 0, cfg.dp);
            for w in 1..=top {
                let te = iterated_abs_bound(spec, &sums, u, cfg.t, w, &m) + direct_abs_bound(row, u, w, &ew, &m);
                prop_assert!(te <= thr, "{id} width {w}: total bound {te:e} exceeds threshold {thr:e}");
            }
        }
    }
}

#[test]
fn trimming_never_moves_the_detector_past_its_threshold() {
    let m = FloatModel::binary64();
    let spec = build_benchmark("heat1d", 32).unwrap().spec;
    for t in 1..=6usize {
        let table = unroll_coefficients(&spec, t).unwrap();
        let sums = PathSums::from_table(&table);
        let row = table.row(t).unwrap();
        let e = sums.top_exponent(t, 0, 1).unwrap();
        let full = EssentialWidth::full(&row.radius);
        let dp = combine(iterated_abs_bound(&spec, &sums, 0, t, 1, &m), direct_abs_bound(row, 0, 1, &full, &m), e, &m).dp;
        let ew = essential_width(row, 0, 1, dp);
        let thr = threshold(e, 0, dp);
        let excluded: Vec<f64> = (-(t as i32)..=t as i32).filter(|o| !ew.contains(&[*o])).map(|o| row.get(0, 0, &[o]).to_f64()).collect();
        for mask in 0u32..(1 << excluded.len()) {
            let diff = excluded
                .iter()
                .enumerate()
                .fold(ExtendedFloat::ZERO, |acc, (j, &c)| acc + ExtendedFloat::from(c * if mask >> j & 1 == 1 { 2.0 } else { 1.0 }));
            assert!(diff.abs().to_f64() < thr, "T={t} endpoint mask {mask:b}");
        }
    }
}
