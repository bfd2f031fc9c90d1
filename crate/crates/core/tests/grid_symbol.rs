use std::f64::consts::PI;

use hypfio::grid::{forward_ft, inverse_ft, japanese_bracket, Field, Grid, Side};
use hypfio::operator::GridOperator;
use hypfio::symbol::{adjoint_symbol, compose_fio_pdo, compose_pdo, diagonalizer, seminorm, SampleCloud, Side as ComposeSide, Symbol};
use hypfio::eikonal::PhaseFunction;
use hypfio::Error;
use nalgebra::DMatrix;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn c(v: f64) -> Complex64 {
    Complex64::new(v, 0.0)
}

fn random_field(g: &std::sync::Arc<Grid>, seed: u64, complex: bool) -> Field {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..g.total())
        .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), if complex { rng.gen_range(-1.0..1.0) } else { 0.0 }))
        .collect();
    Field::from_vec(g, data, Side::Physical).unwrap()
}

#[test]
fn constant_and_plane_wave_spikes() {
    let g = Grid::new(1, 2.0 * PI, 32).unwrap();
    let one = forward_ft(&Field::from_real_fn(&g, |_| 1.0)).unwrap();
    assert!((one.at_lattice(&[0]).unwrap() - c(2.0 * PI)).norm() < 1e-12);
    let off: f64 = one.data().iter().skip(1).map(|v| v.norm()).fold(0.0, f64::max);
    assert!(off < 1e-12);
    let wave = forward_ft(&Field::from_fn(&g, |x| Complex64::from_polar(1.0, 5.0 * x[0]))).unwrap();
    assert!((wave.at_lattice(&[5]).unwrap() - c(2.0 * PI)).norm() < 1e-12);
}

#[test]
fn gaussian_transform() {
    let g = Grid::new(1, 40.0, 512).unwrap();
    let ft = forward_ft(&Field::from_real_fn(&g, |x| (-0.5 * x[0] * x[0]).exp())).unwrap();
    // Riemann sum of the continuous transform at a few frequencies, summed directly
    for kappa in [0i64, 3, -7, 20] {
        let xi = kappa as f64 * g.dxi();
        let direct: Complex64 = (0..g.total())
            .map(|j| {
                let x = g.coord(j);
                Complex64::from_polar((-0.5 * x * x).exp() * g.h(), -x * xi)
            })
            .sum();
        let got = ft.at_lattice(&[kappa]).unwrap();
        assert!((got - direct).norm() < 1e-10);
        assert!((got.re - (2.0 * PI).sqrt() * (-0.5 * xi * xi).exp()).abs() < 1e-10);
    }
}

#[test]
fn roundtrips() {
    let g1 = Grid::new(1, 7.0, 64).unwrap();
    let f = random_field(&g1, 1, false);
    let back = inverse_ft(&forward_ft(&f).unwrap()).unwrap();
    assert!(back.max_abs_diff(&f) < 1e-12 * f.max_abs());
    let g2 = Grid::new(2, 2.0 * PI, 64).unwrap();
    let f2 = random_field(&g2, 2, true);
    let back2 = inverse_ft(&forward_ft(&f2).unwrap()).unwrap();
    assert!(back2.max_abs_diff(&f2) < 1e-12 * f2.max_abs());
    let mut spike = Field::zeros(&g1, Side::Spectral);
    spike.data_mut()[0] = c(7.0);
    let flat = inverse_ft(&spike).unwrap();
    assert!(flat.data().iter().all(|v| (v - c(1.0)).norm() < 1e-14));
}

#[test]
fn side_mismatch() {
    let g = Grid::new(1, 1.0, 8).unwrap();
    assert!(matches!(forward_ft(&Field::zeros(&g, Side::Spectral)), Err(Error::Contract(_))));
    assert!(matches!(inverse_ft(&Field::zeros(&g, Side::Physical)), Err(Error::Contract(_))));
}

#[test]
fn brackets() {
    assert_eq!(japanese_bracket(&[0.0]), 1.0);
    assert!((japanese_bracket(&[3.0, 4.0]) - 26f64.sqrt()).abs() < 1e-15);
    assert!((japanese_bracket(&[1.0, 0.0, 0.0]) - 2f64.sqrt()).abs() < 1e-15);
}

#[test]
fn lattice_is_symmetric() {
    for n in [4usize, 16, 64] {
        let g = Grid::new(1, 3.0, n).unwrap();
        assert!((g.h() * n as f64 - 3.0).abs() < 1e-14);
        let ks: Vec<i64> = (0..n).map(|k| g.freq(k)).collect();
        assert_eq!(*ks.iter().min().unwrap(), -(n as i64) / 2);
        assert_eq!(*ks.iter().max().unwrap(), n as i64 / 2 - 1);
    }
    assert!(Grid::new(1, 1.0, 7).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn parseval(seed in 0u64..1000, d in 1usize..=2) {
        let g = Grid::new(d, 5.0, 16).unwrap();
        let f = random_field(&g, seed, true);
        let ft = forward_ft(&f).unwrap();
        let phys: f64 = f.data().iter().map(|v| v.norm_sqr()).sum::<f64>() * g.cell_volume();
        let spec: f64 = ft.data().iter().map(|v| v.norm_sqr()).sum::<f64>() / g.len().powi(d as i32);
        prop_assert!((phys - spec).abs() < 1e-12 * phys);
    }

    #[test]
    fn real_fields_have_hermitian_spectra(seed in 0u64..1000, d in 1usize..=3) {
        let g = Grid::new(d, 2.0, 8).unwrap();
        let ft = forward_ft(&random_field(&g, seed, false)).unwrap();
        prop_assert!(ft.hermitian_defect().unwrap() < 1e-12);
    }

    #[test]
    fn transform_is_linear(seed in 0u64..1000, a in -3.0f64..3.0) {
        let g = Grid::new(1, 4.0, 32).unwrap();
        let f = random_field(&g, seed, true);
        let h = random_field(&g, seed + 1, true);
        let mut sum = f.clone();
        sum.axpy(c(a), &h).unwrap();
        let mut expect = forward_ft(&f).unwrap();
        expect.axpy(c(a), &forward_ft(&h).unwrap()).unwrap();
        prop_assert!(forward_ft(&sum).unwrap().max_abs_diff(&expect) < 1e-11);
    }
}

#[test]
fn seminorm_examples() {
    let g = Grid::new(1, 2.0 * PI, 64).unwrap();
    let cloud = SampleCloud::for_grid(&g, 1.0, vec![0.0]);
    assert!((seminorm(&Symbol::bracket(1, 1.0), 0, 1.0, &cloud).unwrap() - 1.0).abs() < 1e-14);
    let one = Symbol::constant(1, c(1.0));
    assert!((seminorm(&one, 2, 1.0, &cloud).unwrap() - 1.0).abs() < 1e-12);

    // sin(x) xi: brute-force max of |d_xi^a d_x^b p| <xi>^{a-1} over a dense cloud
    let p = Symbol::new(1, 1.0, |_, x, xi| c(x[0].sin() * xi[0])).with_grid_step(&g);
    let v = seminorm(&p, 1, 1.0, &cloud).unwrap();
    let mut brute: f64 = 0.0;
    for x in &cloud.xs {
        for xi in &cloud.xis {
            let (s, co, b) = (x[0].sin(), x[0].cos(), japanese_bracket(xi));
            brute = brute.max((s * xi[0]).abs() / b).max((co * xi[0]).abs() / b).max(s.abs());
        }
    }
    assert!((v - brute).abs() < 1e-6, "{v} vs {brute}");
    assert!(v > 0.99 && v < 1.0 + 1e-6);
    assert!(matches!(seminorm(&p.clone().with_depth(1), 2, 1.0, &cloud), Err(Error::UnsupportedDepth { .. })));
}

#[test]
fn composition_examples() {
    // x-independent factors compose exactly
    let p = Symbol::multiplier(1, 1.0, |_, xi| c(xi[0].abs() + 0.5));
    let q = Symbol::bracket(1, -1.0);
    let r = compose_pdo(&p, &q, 4);
    for xi in [0.0, 0.3, -4.0, 100.0] {
        let expect = p.eval(0.0, &[0.0], &[xi]) * q.eval(0.0, &[0.0], &[xi]);
        assert!((r.eval(0.0, &[0.2], &[xi]) - expect).norm() < 1e-15);
    }
    assert_eq!(r.order(), 0.0);

    // regularized root times the diagonalizer entry is zeta / 2
    let k = 4.0;
    let lt = Symbol::multiplier(1, 1.0, move |t, xi| c((t.powf(k) + japanese_bracket(xi).powi(-2)).sqrt() * xi[0].abs()));
    let m = Symbol::multiplier(1, 0.0, |_, xi| c(japanese_bracket(xi) / (2.0 * xi[0].abs())));
    let prod = compose_pdo(&lt, &m, 2);
    for &(t, xi) in &[(0.0f64, 1.0f64), (0.3, -5.0), (0.9, 40.0)] {
        let zeta = (1.0 + t.powf(k) * japanese_bracket(&[xi]).powi(2)).sqrt();
        assert!((prod.eval(t, &[0.0], &[xi]).re - zeta / 2.0).abs() < 1e-13 * zeta);
    }

    // a(x) = 2 + sin x: D_x a D_x on trigonometric test functions
    let a = |x: f64| 2.0 + x.sin();
    let pxi = Symbol::multiplier(1, 1.0, |_, xi| c(xi[0]));
    let qa = Symbol::new(1, 1.0, move |_, x, xi| c(a(x[0]) * xi[0])).with_dx(1e-3);
    let comp = compose_pdo(&pxi, &qa, 2);
    let g = Grid::new(1, 2.0 * PI, 64).unwrap();
    let op = GridOperator::pdo(comp, &g);
    for kf in [1.0f64, 3.0] {
        let u = Field::from_real_fn(&g, move |x| (kf * x[0]).cos());
        let got = op.apply(&u, 0.0, 0.0).unwrap();
        // D_x (a D_x u) = -(a u')'
        let expect = Field::from_real_fn(&g, move |x| {
            let x = x[0];
            kf * kf * a(x) * (kf * x).cos() + kf * x.cos() * (kf * x).sin()
        });
        assert!(got.max_abs_diff(&expect) < 1e-5, "k={kf}: {}", got.max_abs_diff(&expect));
    }
}

#[test]
fn fio_pdo_composition() {
    let p = Symbol::multiplier(1, 1.0, |_, xi| c(xi[0]));
    let q = Symbol::new(1, 1.0, |_, x, xi| c(x[0].cos() * xi[0])).with_dx(1e-3);
    let lin = compose_fio_pdo(&p, &PhaseFunction::linear(1), &q, ComposeSide::Left, 0.0);
    let pdo = compose_pdo(&p, &q, 2);
    for &(x, xi) in &[(0.4, 3.0), (-2.0, -7.5)] {
        assert!((lin.eval(0.5, &[x], &[xi]) - pdo.eval(0.5, &[x], &[xi])).norm() < 1e-9);
    }
    let one = Symbol::constant(1, c(1.0));
    let qx = Symbol::bracket(1, -1.0);
    for side in [ComposeSide::Left, ComposeSide::Right] {
        let r = compose_fio_pdo(&one, &PhaseFunction::transport(1, 1.0), &qx, side, 0.0);
        assert!((r.eval(0.7, &[1.0], &[2.0]) - qx.eval(0.7, &[1.0], &[2.0])).norm() < 1e-14);
    }
}

#[test]
fn adjoint_identity_on_grid() {
    let g = Grid::new(1, 2.0 * PI, 64).unwrap();
    let p = Symbol::new(1, 1.0, |_, x, xi| Complex64::new(x[0].sin() * xi[0], 0.3 * xi[0])).with_dx(1e-3);
    let pa = adjoint_symbol(&p, 2);
    let (op, opa) = (GridOperator::pdo(p, &g), GridOperator::pdo(pa, &g));
    let u = Field::from_fn(&g, |x| Complex64::new((2.0 * x[0]).cos(), (3.0 * x[0]).sin()));
    let v = Field::from_fn(&g, |x| Complex64::new(x[0].sin() + 0.5, (5.0 * x[0]).cos()));
    let inner = |a: &Field, b: &Field| -> Complex64 { a.data().iter().zip(b.data()).map(|(p, q)| p * q.conj()).sum::<Complex64>() * g.h() };
    let lhs = inner(&op.apply(&u, 0.0, 0.0).unwrap(), &v);
    let rhs = inner(&u, &opa.apply(&v, 0.0, 0.0).unwrap());
    assert!((lhs - rhs).norm() < 1e-8, "{lhs} vs {rhs}");
    let real = Symbol::multiplier(1, -1.0, |_, xi| c(1.0 / japanese_bracket(xi)));
    let ra = adjoint_symbol(&real, 3);
    assert!((ra.eval(0.0, &[0.5], &[3.0]) - real.eval(0.0, &[0.5], &[3.0])).norm() < 1e-15);
}

#[test]
fn diagonalizers() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let l1 = Symbol::abs_xi(1);
    let dg = diagonalizer(&[l1.clone(), l1.scale(c(-1.0))], &Symbol::bracket(1, 1.0), None, 1e-3).unwrap();
    for _ in 0..50 {
        let (t, x, xi) = (rng.gen_range(0.0..1.0), rng.gen_range(-3.0..3.0), rng.gen_range(-50.0..50.0));
        let m12 = dg.m.get(0, 1).eval(t, &[x], &[xi]).re;
        assert!((m12 - japanese_bracket(&[xi]) / (2.0 * f64::abs(xi))).abs() < 1e-13 * m12);
        let prod = dg.m.eval(t, &[x], &[xi]) * dg.m_inv.eval(t, &[x], &[xi]);
        assert!((prod - DMatrix::identity(2, 2)).norm() < 1e-14);
    }

    let root = |k: f64| Symbol::multiplier(1, 1.0, move |_, xi| c(k * xi[0].abs()));
    let roots = [root(-1.0), root(0.0), root(1.0)];
    let dg3 = diagonalizer(&roots, &Symbol::bracket(1, 1.0), None, 1e-3).unwrap();
    for _ in 0..50 {
        let xi = rng.gen_range(0.5..200.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let b = japanese_bracket(&[xi]);
        let mut k = DMatrix::<Complex64>::zeros(3, 3);
        for j in 0..3 {
            k[(j, j)] = roots[j].eval(0.0, &[0.0], &[xi]);
            if j < 2 {
                k[(j, j + 1)] = c(-b);
            }
        }
        let m = dg3.m.eval(0.0, &[0.0], &[xi]);
        let d = dg3.m_inv.eval(0.0, &[0.0], &[xi]) * k * m;
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(d[(i, j)].norm() < 1e-12 * b, "({i},{j}) = {}", d[(i, j)]);
                }
            }
        }
    }
    let cloud = SampleCloud::new(1, (0.0, 1.0), 2, 1.0, 10.0, 4, 2, vec![0.0]);
    let bad = diagonalizer(&[root(1.0), root(1.0)], &Symbol::bracket(1, 1.0), Some(&cloud), 1e-3);
    assert!(matches!(bad, Err(Error::Degenerate { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn composed_orders_add(m1 in -2.0f64..2.0, m2 in -2.0f64..2.0) {
        let g = Grid::new(1, 2.0 * PI, 32).unwrap();
        let cloud = SampleCloud::for_grid(&g, 1.0, vec![0.0]);
        let r = compose_pdo(&Symbol::bracket(1, m1), &Symbol::bracket(1, m2), 2);
        prop_assert!((r.order() - (m1 + m2)).abs() < 1e-15);
        prop_assert!((seminorm(&r, 0, 1.0, &cloud).unwrap() - 1.0).abs() < 1e-12);
    }
}
