use std::f64::consts::PI;
use std::sync::Arc;

use hypfio::factorization::{Coefficient, HyperbolicOperator};
use hypfio::grid::{Field, Grid};
use hypfio::propagator::{assemble_solution_ops, duhamel_solve, fundamental_solution, PropagatorOptions, SolutionOperators};
use hypfio::wave::{energy, fundamental_ft, wave_ops, WaveOracle};
use hypfio::{Error, Result};
use num_complex::Complex64;
use proptest::prelude::*;

fn grid(n: usize) -> Arc<Grid> {
    Grid::new(1, 2.0 * PI, n).unwrap()
}

fn wave_solution_ops(n: usize, t_bar: f64, truncation: usize) -> SolutionOperators {
    let opts = PropagatorOptions { truncation, ..PropagatorOptions::default() };
    assemble_solution_ops(fundamental_solution(&HyperbolicOperator::wave(1, 1.0), &grid(n), t_bar, opts).unwrap())
}

fn variable_ops() -> SolutionOperators {
    let op = HyperbolicOperator::scalar_1d(Coefficient::from_expr("2 + 0.3*sin(x1)").unwrap().time_independent());
    assemble_solution_ops(fundamental_solution(&op, &grid(32), 0.2, PropagatorOptions::default()).unwrap())
}

fn max_diff(a: &[Field], b: &[Field]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max)
}

#[test]
fn propagator_is_identity_at_equal_times() {
    let g = grid(32);
    let data = vec![Field::from_real_fn(&g, |x| x[0].sin()), Field::from_real_fn(&g, |x| (-(x[0] * x[0])).exp())];
    for ops in [wave_solution_ops(32, 1.0, 4), variable_ops()] {
        for s in [0.0, 0.1] {
            let out = ops.propagator().apply(s, s, &data).unwrap();
            assert!(max_diff(&out, &data) < 1e-10, "s={s}: {}", max_diff(&out, &data));
        }
        let u0 = &data[0];
        assert!(ops.apply_initial(0, 0.0, u0).unwrap().max_abs_diff(u0) < 1e-10);
        assert!(ops.apply_initial(1, 0.0, u0).unwrap().max_abs() < 1e-10);
    }
}

#[test]
fn wave_truncation_changes_nothing() {
    let a = wave_solution_ops(32, 1.0, 0);
    let b = wave_solution_ops(32, 1.0, 4);
    assert!(b.propagator().level_norms().iter().all(|&w| w < 1e-13), "{:?}", b.propagator().level_norms());
    let (ma, mb) = (a.propagator().matrix(0, 0.8, 0.1).unwrap(), b.propagator().matrix(4, 0.8, 0.1).unwrap());
    assert!((ma - mb).iter().all(|v| v.norm() < 1e-15));
    for xi in [0.0, 2.0, -7.0] {
        let (ea, eb) = (a.propagator().multiplier(0.8, 0.1, &[xi]).unwrap(), b.propagator().multiplier(0.8, 0.1, &[xi]).unwrap());
        assert!((ea - eb).iter().all(|v| v.norm() < 1e-15));
    }
}

#[test]
fn wave_solution_symbols() {
    let ops = wave_solution_ops(64, 2.0, 4);
    let g = ops.grid().clone();
    let oracle = WaveOracle::new(1);
    for k in 0..g.total() {
        let xi = g.xi(k);
        for &(t, s) in &[(1.3, 0.0), (2.0, 0.7)] {
            let t0 = ops.symbol(0, t, 0.0, &xi).unwrap();
            let t2 = ops.symbol(2, t, s, &xi).unwrap();
            assert!((t0 - Complex64::new(oracle.position_symbol(t, 0.0, &xi), 0.0)).norm() < 1e-12);
            assert!((t2 - Complex64::new(oracle.source_symbol(t, s, &xi), 0.0)).norm() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn wave_propagator_is_a_two_parameter_semigroup(s in 0.0f64..0.5, dr in 0.0f64..0.5, dt in 0.0f64..0.5) {
        let ops = wave_solution_ops(32, 2.0, 2);
        let p = ops.propagator();
        let g = ops.grid().clone();
        let data = vec![Field::from_real_fn(&g, |x| (2.0 * x[0]).cos()), Field::from_real_fn(&g, |x| x[0].sin().powi(3))];
        let (r, t) = (s + dr, s + dr + dt);
        let two = p.apply(t, r, &p.apply(r, s, &data).unwrap()).unwrap();
        let one = p.apply(t, s, &data).unwrap();
        prop_assert!(max_diff(&two, &one) < 1e-11);
    }
}

#[test]
fn duhamel_examples() {
    let ops = wave_solution_ops(32, 4.0, 4);
    let g = ops.grid().clone();
    let sin = Field::from_real_fn(&g, |x| x[0].sin());
    let zero = Field::from_real_fn(&g, |_| 0.0);
    for t in [1.0, PI] {
        let u = duhamel_solve(&ops, &[sin.clone(), zero.clone()], None, t).unwrap();
        let expect = Field::from_real_fn(&g, |x| t.cos() * x[0].sin());
        assert!(u.max_abs_diff(&expect) < 1e-12);
    }
    // f = sin(x): u = (1 - cos t) sin x
    let src = |_s: f64| -> Result<Field> { Ok(Field::from_real_fn(&grid(32), |x| x[0].sin())) };
    let u = duhamel_solve(&ops, &[zero.clone(), zero.clone()], Some(&src), 2.0).unwrap();
    let expect = Field::from_real_fn(&g, |x| (1.0 - 2f64.cos()) * x[0].sin());
    assert!(u.max_abs_diff(&expect) < 1e-10, "{}", u.max_abs_diff(&expect));
    let nothing = duhamel_solve(&ops, &[zero.clone(), zero.clone()], None, 1.0).unwrap();
    assert_eq!(nothing.max_abs(), 0.0);
    assert!(matches!(duhamel_solve(&ops, &[zero.clone(), zero], None, 5.0), Err(Error::Horizon { .. })));
}

#[test]
fn variable_speed_duhamel_satisfies_the_equation() {
    // second time difference against a u_xx + f at interior times
    let ops = variable_ops();
    let g = ops.grid().clone();
    let u0 = Field::from_real_fn(&g, |x| x[0].cos());
    let u1 = Field::from_real_fn(&g, |x| 0.5 * x[0].sin());
    let u = |t: f64| duhamel_solve(&ops, &[u0.clone(), u1.clone()], None, t).unwrap();
    let (t, h) = (0.1, 1e-3);
    let (um, uc, up) = (u(t - h), u(t), u(t + h));
    let utt: Vec<f64> = (0..g.total()).map(|j| (up.data()[j].re - 2.0 * uc.data()[j].re + um.data()[j].re) / (h * h)).collect();
    let uxx = hypfio::operator::apply_multiplier(&uc, |xi| Complex64::new(-xi[0] * xi[0], 0.0)).unwrap();
    let worst = (0..g.total())
        .map(|j| {
            let a = 2.0 + 0.3 * g.coord(j).sin();
            (utt[j] - a * uxx.data()[j].re).abs()
        })
        .fold(0.0, f64::max);
    assert!(worst < 1e-3, "residual {worst}");
}

#[test]
fn wave_fundamental_values() {
    assert_eq!(fundamental_ft(0.7, &[0.0]), 0.7);
    assert!(fundamental_ft(2.0, &[PI / 2.0]).abs() < 1e-15);
    assert!(fundamental_ft(1.0, &[PI]).abs() < 1e-15);
    assert!((fundamental_ft(0.3, &[1e-9]) - 0.3).abs() < 1e-15);
    let g = grid(16);
    let ops = wave_ops(&g, 0.4, 0.4).unwrap();
    let v = Field::from_real_fn(&g, |x| (3.0 * x[0]).cos() + 0.1);
    assert!(ops.position.apply(&v, 0.4, 0.4).unwrap().max_abs_diff(&v) < 1e-14);
    assert!(ops.source.apply(&v, 0.4, 0.4).unwrap().max_abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn wave_symbols_are_bounded(tau in 0.0f64..5.0, xi in -100.0f64..100.0) {
        let o = WaveOracle::new(1);
        let bound = o.symbol_bound(tau, 0.0);
        for v in [o.position_symbol(tau, 0.0, &[xi]), o.velocity_symbol(tau, 0.0, &[xi]), o.source_symbol(tau, 0.0, &[xi])] {
            prop_assert!(v.abs() <= bound * (1.0 + 1e-15));
        }
    }

    #[test]
    fn wave_energy_is_conserved(t in 0.0f64..10.0, a in -2.0f64..2.0) {
        let g = grid(32);
        let u0 = Field::from_real_fn(&g, |x| (x[0].sin() * 1.5).exp() + a);
        let u1 = Field::from_real_fn(&g, |x| a * (2.0 * x[0]).cos());
        let e0 = energy(&g, &u0, &u1, 0.0).unwrap();
        prop_assert!((energy(&g, &u0, &u1, t).unwrap() - e0).abs() < 1e-12 * e0.max(1.0));
    }
}
