use hypfio::grid::Grid;
use hypfio::weak::{
    build_weak_system, integral_inequality, lambda_gap_integral, separation_margins, verify_symbol_bounds, IneqCase, WeakHypConfig,
    WeakSymbols,
};
use hypfio::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::gamma::gamma;

fn br(xi: f64) -> f64 {
    (1.0 + xi * xi).sqrt()
}

#[test]
fn exponent_and_coupling_are_checked() {
    assert!(matches!(WeakHypConfig::new(2, 1.0), Err(Error::WeakExponent(2))));
    assert!(WeakHypConfig::new(3, 0.0).is_err());
    assert!(WeakHypConfig::new(4, 0.5).is_ok());
}

#[test]
fn diagonalizer_cancels_the_principal_part() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let k = rng.gen_range(3..9);
        let sy = WeakSymbols::new(&WeakHypConfig::new(k, rng.gen_range(0.01..2.0)).unwrap());
        let (t, xi) = (rng.gen_range(0.0..1.0), rng.gen_range(-1e3..1e3));
        assert!(sy.q0_residual(t, xi) < 1e-14, "k={k} t={t} xi={xi}: {}", sy.q0_residual(t, xi));
    }
}

#[test]
fn gap_in_closed_form() {
    let sy = WeakSymbols::new(&WeakHypConfig::new(4, 1.0).unwrap());
    for xi in [0.5, 3.0, -40.0, 1e4] {
        let b = br(xi);
        // at t = 1: |xi| (sqrt(1 + <xi>^-2) - 1)
        let expect = xi.abs() * (0.5 * b.powi(-2).ln_1p()).exp_m1();
        assert!((sy.lambda_gap(1.0, xi) - expect).abs() < 1e-12 * expect.max(1e-300), "xi={xi}");
        assert!((sy.lambda_tilde(0.0, xi) - xi.abs() / b).abs() < 1e-15);
        assert_eq!(sy.lambda(0.0, xi), 0.0);
    }
    let g = Grid::new(1, 2.0 * std::f64::consts::PI, 32).unwrap();
    let m = separation_margins(&WeakHypConfig::new(4, 1.0).unwrap(), &g, &[0.0, 0.5, 1.0]).unwrap();
    assert_eq!(m.true_min, 0.0);
    // smallest nonzero lattice frequency is 1: 2 / sqrt 2
    assert!((m.regularized_floor - 2f64.sqrt()).abs() < 1e-15);
    assert!((m.regularized_min - m.regularized_floor).abs() < 1e-15);
}

#[test]
fn gap_integral_stays_below_the_sharp_constant() {
    for k in [3u32, 4, 6, 8] {
        let cfg = WeakHypConfig::new(k, 1.0).unwrap();
        let kf = k as f64;
        let sharp = gamma(1.0 / kf) * gamma(0.5 - 1.0 / kf) / (kf * gamma(0.5));
        for b in [2.0, 10.0, 100.0, 1000.0] {
            let xi = (b * b - 1.0f64).sqrt();
            let v = lambda_gap_integral(&cfg, xi).unwrap();
            assert!(v > 0.0 && v <= sharp, "k={k} <xi>={b}: {v} vs {sharp}");
        }
    }
    // frozen values at k = 6
    let cfg = WeakHypConfig::new(6, 1.0).unwrap();
    for (b, v) in [(2.0, 0.6162), (10.0, 0.461), (1000.0, 0.105)] {
        let got = lambda_gap_integral(&cfg, (b * b - 1.0f64).sqrt()).unwrap();
        assert!((got - v).abs() < 2e-3, "<xi>={b}: {got}");
    }
}

#[test]
fn integral_inequality_cases() {
    let b = integral_inequality(3.0, 1.0, 2.0, 10.0).unwrap();
    assert_eq!(b.case, IneqCase::Bounded);
    assert!((b.bound - 0.75).abs() < 1e-15);
    // int_0^1 t^3 / (t^2 + e) dt = 1/2 - (e/2) ln((1 + e)/e)
    let e = 0.01f64;
    assert!((b.numeric - (0.5 - 0.5 * e * ((1.0 + e) / e).ln())).abs() < 1e-9);
    assert!(b.holds);

    let l = integral_inequality(1.0, 1.0, 2.0, 50.0).unwrap();
    assert_eq!(l.case, IneqCase::Logarithmic);
    // int_0^1 t / (t^2 + e) dt = ln((1 + e)/e) / 2
    let e = 50f64.powi(-2);
    assert!((l.numeric - 0.5 * ((1.0 + e) / e).ln()).abs() < 1e-9);
    assert!(l.holds);

    // growing with (alpha + 1)/delta < 1: the Beta constant is attained as <xi> grows
    let mut last = 0.0;
    for br in [2.0, 10.0, 100.0, 1e4] {
        let g = integral_inequality(0.0, 0.5, 4.0, br).unwrap();
        assert_eq!(g.case, IneqCase::Growing);
        assert!(g.holds);
        let ratio = g.numeric / g.bound;
        assert!(ratio <= 1.0 && ratio > last, "<xi>={br}: {ratio}");
        last = ratio;
    }
    assert!(last > 0.99, "{last}");
    assert!(integral_inequality(-1.0, 1.0, 1.0, 2.0).is_err());
    assert!(integral_inequality(0.0, 1.0, 1.0, 0.5).is_err());
}

#[test]
fn low_order_symbol_bounds_hold() {
    for k in [3u32, 4, 6] {
        let rows = verify_symbol_bounds(&WeakHypConfig::new(k, 1.0).unwrap(), 2, &[2.0, 10.0, 100.0]).unwrap();
        assert!(!rows.is_empty());
        for r in rows.iter().filter(|r| r.l == 0) {
            assert!(r.holds, "{r:?}");
        }
        assert!(rows.iter().all(|r| r.integral.is_finite() && r.bound > 0.0));
    }
}

#[test]
fn propagator_composes() {
    let sys = build_weak_system(WeakHypConfig::new(4, 0.5).unwrap()).unwrap();
    for xi in [3.0, -20.0] {
        let id = sys.propagator(0.4, 0.4, xi, None).unwrap();
        assert!((id - nalgebra::Matrix2::<num_complex::Complex64>::identity()).norm() < 1e-12);
        assert!(sys.source_symbol(0.4, 0.4, xi, None).unwrap().norm() < 1e-12);
        let two = sys.propagator(0.9, 0.5, xi, None).unwrap() * sys.propagator(0.5, 0.1, xi, None).unwrap();
        let one = sys.propagator(0.9, 0.1, xi, None).unwrap();
        assert!((two - one).norm() < 1e-6 * one.norm(), "xi={xi}: {}", (two - one).norm());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn regularized_root_dominates(k in 3u32..9, t in 0.0f64..1.0, xi in -1e4f64..1e4) {
        let sy = WeakSymbols::new(&WeakHypConfig::new(k, 1.0).unwrap());
        let (lt, l) = (sy.lambda_tilde(t, xi), sy.lambda(t, xi));
        prop_assert!(lt >= l);
        prop_assert!(sy.zeta(t, xi) >= 1.0);
        prop_assert!(sy.lambda_gap(t, xi) >= 0.0);
        let b = br(xi);
        let lhs = lt * lt - l * l;
        let rhs = xi * xi / (b * b);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (lt * lt).max(1.0));
    }
}
