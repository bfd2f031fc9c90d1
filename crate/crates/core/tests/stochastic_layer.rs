use std::f64::consts::PI;
use std::sync::Arc;

use hypfio::grid::{Field, Grid};
use hypfio::stochastic::{
    check_a1, check_a3, continuity_modulus, dalang_integral, mode_weights, pathwise_convolution, random_field_solution, sample_noise,
    sample_noise_stream, second_moment_bound, stochastic_convolution, AdmissibilityOptions, CoefficientPair, FtMode, KernelBound,
    ShellOptions, SimulationOptions, SourceKernel, SpaceTime, SpectralMeasure, Verdict,
};
use hypfio::wave::WaveKernel;
use hypfio::Result;
use num_complex::Complex64;
use proptest::prelude::*;

fn grid(len: f64, n: usize) -> Arc<Grid> {
    Grid::new(1, len, n).unwrap()
}

fn origin(d: usize) -> Vec<Vec<f64>> {
    vec![vec![0.0; d]]
}

#[test]
fn dalang_closed_forms() {
    let sh = ShellOptions::default();
    let one = dalang_integral(&SpectralMeasure::white_noise(1), 1.0, &origin(1), &sh).unwrap();
    assert_eq!(one.verdict, Verdict::Finite);
    assert!((one.sup_value - PI).abs() < 1e-6);
    let d3 = dalang_integral(&SpectralMeasure::white_noise(3), 1.0, &origin(3), &sh).unwrap();
    assert_eq!(d3.verdict, Verdict::Infinite);
    let d3b = dalang_integral(&SpectralMeasure::white_noise(3), 2.0, &origin(3), &sh).unwrap();
    assert_eq!(d3b.verdict, Verdict::Finite);
    assert!((d3b.sup_value - PI * PI).abs() < 1e-5);
    let delta = dalang_integral(&SpectralMeasure::delta0(2), 0.3, &[vec![0.0, 0.0], vec![1.0, 2.0]], &sh).unwrap();
    assert!((delta.sup_value - 1.0).abs() < 1e-15);
    assert!((delta.per_eta[1].value - 6f64.powf(-0.3)).abs() < 1e-15);
    assert!(dalang_integral(&SpectralMeasure::white_noise(1), 0.0, &origin(1), &sh).is_err());
}

#[test]
fn riesz_sweep_flips_at_two() {
    let sh = ShellOptions::default();
    for eta in [0.5, 1.0, 1.5] {
        let r = dalang_integral(&SpectralMeasure::riesz(2, eta).unwrap(), 1.0, &origin(2), &sh).unwrap();
        assert_eq!(r.verdict, Verdict::Finite, "eta={eta}");
        // 2 pi int r^{eta-1} (1+r^2)^{-1} dr = pi^2 / sin(pi eta / 2)
        let expect = PI * PI / (PI * eta / 2.0).sin();
        assert!((r.sup_value - expect).abs() < 1e-4 * expect, "eta={eta}: {} vs {expect}", r.sup_value);
    }
    let r = dalang_integral(&SpectralMeasure::riesz(2, 2.5).unwrap(), 1.0, &origin(2), &sh).unwrap();
    assert_eq!(r.verdict, Verdict::Infinite);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn dalang_decreases_in_nu(nu in 0.6f64..1.0, dn in 0.05f64..1.0, eta in 0.0f64..1.5) {
        let mu = SpectralMeasure::bessel(1, eta).unwrap();
        let sh = ShellOptions::default();
        let a = dalang_integral(&mu, nu, &origin(1), &sh).unwrap();
        let b = dalang_integral(&mu, nu + dn, &origin(1), &sh).unwrap();
        prop_assert!(b.sup_value <= a.sup_value * (1.0 + 1e-6));
        if a.verdict == Verdict::Finite {
            prop_assert_eq!(b.verdict, Verdict::Finite);
        }
    }
}

fn wave_kernel() -> WaveKernel {
    WaveKernel::new(&grid(20.0 * PI, 256), 2.0)
}

#[test]
fn a1_for_the_wave_kernel() {
    let k = wave_kernel();
    let g = k.grid().clone();
    let opts = AdmissibilityOptions::default();
    let mu = SpectralMeasure::white_noise(1);
    // int_0^T int sin^2((T-s) xi)/xi^2 dxi ds = pi T^2 / 2
    for t in [0.5, 1.0] {
        let a = check_a1(KernelBound::Kernel(&k), &SpaceTime::constant(1.0), &mu, t, &[0.0], &g, &opts).unwrap();
        assert_eq!(a.verdict, Verdict::Finite);
        assert!((a.value - PI * t * t / 2.0).abs() < 1e-5, "t={t}: {}", a.value);
    }
    // ||F e^{-x^2}||_1 = 1 and white noise is shift invariant, so the value is the same
    let gauss = SpaceTime::from_expr("exp(-x1^2)").unwrap();
    let a = check_a1(KernelBound::Kernel(&k), &gauss, &mu, 1.0, &[0.0], &g, &opts).unwrap();
    assert_eq!(a.verdict, Verdict::Finite);
    assert!((a.value - PI / 2.0).abs() < 1e-4, "{}", a.value);

    let scale = |t: f64, s: f64| (t - s).max(1.0);
    let riesz = SpectralMeasure::riesz(2, 2.5).unwrap();
    let g2 = Grid::new(2, 2.0 * PI, 8).unwrap();
    let bad = check_a1(KernelBound::Order { nu: 1.0, scale: &scale }, &SpaceTime::constant(1.0), &riesz, 1.0, &[0.0, 0.0], &g2, &opts).unwrap();
    assert_eq!(bad.verdict, Verdict::Infinite);
}

#[test]
fn a3_examples() {
    let k = wave_kernel();
    let g = k.grid().clone();
    let opts = AdmissibilityOptions::default();
    let one = check_a3(KernelBound::Kernel(&k), &SpaceTime::constant(1.0), 1.0, &[0.0], &g, &opts).unwrap();
    assert_eq!(one.verdict, Verdict::Finite);
    assert!((one.value - 1.0 / 3.0).abs() < 1e-12);
    // int_0^1 (1-s)^2 s^2 ds with ||F gamma(s)||_1 = s
    let gs = SpaceTime::from_expr("exp(-x1^2) * t").unwrap();
    let v = check_a3(KernelBound::Kernel(&k), &gs, 1.0, &[0.0], &g, &opts).unwrap();
    assert_eq!(v.verdict, Verdict::Finite);
    assert!((v.value - 1.0 / 30.0).abs() < 1e-6, "{}", v.value);
    // one grid cell of height 1/h: its Fourier l1 norm grows under refinement
    let comb = SpaceTime::sampled(|_, g: &Grid| {
        let mut v = vec![0.0; g.total()];
        v[g.n() / 2] = 1.0 / g.h();
        v
    });
    let bad = check_a3(KernelBound::Kernel(&k), &comb, 1.0, &[0.0], &g, &opts).unwrap();
    assert_eq!(bad.verdict, Verdict::Violated);
    assert!(bad.detail.contains("summable"), "{}", bad.detail);
}

#[test]
fn second_moment_bounds() {
    let k = wave_kernel();
    let g = k.grid().clone();
    let opts = AdmissibilityOptions::default();
    let one = SpaceTime::constant(1.0);
    let zero = second_moment_bound(KernelBound::Kernel(&k), &one, &SpectralMeasure::zero(1), 1.0, &[0.0], &g, &opts).unwrap();
    assert_eq!(zero, 0.0);
    let wn = second_moment_bound(KernelBound::Kernel(&k), &one, &SpectralMeasure::white_noise(1), 1.0, &[0.0], &g, &opts).unwrap();
    assert!((wn - PI / 2.0).abs() < 1e-5);
    // <xi>^{-1} kernel bound and unit Fourier mass: int_0^1 sup_eta int <xi + eta>^{-2} dxi ds = pi
    let unit = |_: f64, _: f64| 1.0;
    let gauss = SpaceTime::from_expr("exp(-x1^2)").unwrap();
    let b = second_moment_bound(KernelBound::Order { nu: 1.0, scale: &unit }, &gauss, &SpectralMeasure::white_noise(1), 1.0, &[0.0], &g, &opts).unwrap();
    assert!((b - PI).abs() < 1e-4, "{b}");
}

/// The wave source kernel frozen at s = 0.
struct Frozen(WaveKernel);

impl SourceKernel for Frozen {
    fn grid(&self) -> &Arc<Grid> {
        self.0.grid()
    }
    fn horizon(&self) -> f64 {
        self.0.horizon()
    }
    fn order(&self) -> usize {
        2
    }
    fn source_row(&self, t: f64, _s: f64, x: &[f64]) -> Result<Vec<Complex64>> {
        self.0.source_row(t, 0.0, x)
    }
    fn initial_row(&self, l: usize, t: f64, x: &[f64]) -> Result<Vec<Complex64>> {
        self.0.initial_row(l, t, x)
    }
    fn ft_mode(&self) -> FtMode {
        self.0.ft_mode()
    }
    fn kernel_ft(&self, t: f64, _s: f64, x: &[f64], xi: &[f64]) -> Result<Complex64> {
        self.0.kernel_ft(t, 0.0, x, xi)
    }
}

#[test]
fn continuity_tables() {
    let k = wave_kernel();
    let opts = AdmissibilityOptions::default();
    let hs = [0.1, 0.05, 0.025, 0.0125];
    let mu = SpectralMeasure::white_noise(1);
    let tab = continuity_modulus(&k, &SpaceTime::constant(1.0), &mu, 1.0, &[0.0], &hs, &opts).unwrap();
    assert!(tab.consistent, "{:?}", tab.rows);
    let slope = tab.slope.unwrap();
    assert!((slope - 1.0).abs() < 0.1, "slope {slope}: {:?}", tab.rows);
    let path = continuity_modulus(&k, &SpaceTime::constant(1.0), &SpectralMeasure::delta0(1), 1.0, &[0.0], &hs, &opts).unwrap();
    assert!(path.consistent);
    assert!((path.slope.unwrap() - 2.0).abs() < 0.2, "{:?}", path.rows);
    let frozen = continuity_modulus(&Frozen(wave_kernel()), &SpaceTime::constant(1.0), &mu, 1.0, &[0.0], &hs, &opts).unwrap();
    assert!(frozen.rows.iter().all(|r| r.1 == 0.0), "{:?}", frozen.rows);
}

#[test]
fn noise_realizations() {
    let g = grid(2.0 * PI, 16);
    let mu = SpectralMeasure::bessel(1, 0.5).unwrap();
    let a = sample_noise(&mu, &g, 0.01, 20, 9).unwrap();
    let b = sample_noise(&mu, &g, 0.01, 20, 9).unwrap();
    let c = sample_noise_stream(&mu, &g, 0.01, 20, 9, 1).unwrap();
    for j in 0..20 {
        assert_eq!(a.spectral(j), b.spectral(j));
        assert_ne!(a.spectral(j), c.spectral(j));
        assert!(a.physical(j).unwrap().data().iter().all(|v| v.im.abs() < 1e-12));
    }
    let d = sample_noise(&SpectralMeasure::delta0(1), &g, 0.01, 5, 3).unwrap();
    for j in 0..5 {
        let f = d.physical(j).unwrap();
        let v0 = f.data()[0];
        assert!(f.data().iter().all(|v| (v - v0).norm() < 1e-12));
    }
    assert!(sample_noise(&mu, &g, 0.0, 5, 3).is_err());
}

#[test]
fn mode_variances_match_weights() {
    let g = grid(2.0 * PI, 8);
    let mu = SpectralMeasure::bessel(1, 1.0).unwrap();
    let (dt, steps) = (0.5, 20_000);
    let noise = sample_noise(&mu, &g, dt, steps, 17).unwrap();
    let w = mode_weights(&mu, &g).unwrap();
    for k in 0..g.total() {
        let m2: f64 = (0..steps).map(|j| noise.spectral(j)[k].norm_sqr()).sum::<f64>() / steps as f64;
        let expect = w.weights[k] * dt;
        if expect == 0.0 {
            assert_eq!(m2, 0.0);
        } else {
            // |W|^2 is a sum of squared normals with relative sd at most sqrt(2)
            let se = 2f64.sqrt() * expect / (steps as f64).sqrt();
            assert!((m2 - expect).abs() < 4.0 * se, "k={k}: {m2} vs {expect}");
        }
    }
    assert!((w.retained_mass - w.weights.iter().sum::<f64>()).abs() < 1e-14);
}

#[test]
fn convolutions() {
    let k = WaveKernel::new(&grid(2.0 * PI, 32), 2.0);
    let g = k.grid().clone();
    let noise = sample_noise(&SpectralMeasure::white_noise(1), &g, 0.05, 20, 4).unwrap();
    assert_eq!(stochastic_convolution(&k, &SpaceTime::constant(0.0), &noise, 1.0, &[0.3]).unwrap(), 0.0);
    // linear in sigma for a fixed realization
    let s1 = SpaceTime::from_expr("1 + 0.5*sin(x1)").unwrap();
    let s2 = SpaceTime::from_expr("cos(x1) * t").unwrap();
    let s12 = SpaceTime::from_expr("1 + 0.5*sin(x1) + cos(x1) * t").unwrap();
    let (a, b, ab) = (
        stochastic_convolution(&k, &s1, &noise, 1.0, &[0.3]).unwrap(),
        stochastic_convolution(&k, &s2, &noise, 1.0, &[0.3]).unwrap(),
        stochastic_convolution(&k, &s12, &noise, 1.0, &[0.3]).unwrap(),
    );
    assert!((a + b - ab).abs() < 1e-12 * ab.abs().max(1.0));

    assert_eq!(pathwise_convolution(&k, &SpaceTime::constant(0.0), 1.0, &[0.3], 4, 8).unwrap(), 0.0);
    for (t, x) in [(1.0f64, 0.3f64), (1.7, -2.0)] {
        let v = pathwise_convolution(&k, &SpaceTime::from_expr("sin(x1)").unwrap(), t, &[x], 4, 8).unwrap();
        assert!((v - (1.0 - t.cos()) * x.sin()).abs() < 1e-12, "{v}");
        let c = pathwise_convolution(&k, &SpaceTime::constant(1.0), t, &[x], 4, 8).unwrap();
        assert!((c - t * t / 2.0).abs() < 1e-12);
    }
}

fn sim_opts(dt: f64) -> SimulationOptions {
    SimulationOptions { dt, ..SimulationOptions::default() }
}

#[test]
fn deterministic_random_field() {
    let k = WaveKernel::new(&grid(2.0 * PI, 32), 2.0);
    let g = k.grid().clone();
    let u0 = vec![Field::from_real_fn(&g, |x| x[0].sin()), Field::from_real_fn(&g, |_| 0.0)];
    let coef = CoefficientPair::new(SpaceTime::constant(0.0), SpaceTime::constant(0.0));
    let r = random_field_solution(&k, &u0, &coef, &SpectralMeasure::white_noise(1), 1.5, &[0.4], 5, 1, &sim_opts(0.05)).unwrap();
    assert!((r.mean - 1.5f64.cos() * 0.4f64.sin()).abs() < 1e-12);
    assert!(r.variance < 1e-24, "{}", r.variance);
    assert!(r.samples.iter().all(|&s| s == r.samples[0]));
}

#[test]
fn single_path_is_reproducible() {
    let k = WaveKernel::new(&grid(2.0 * PI, 32), 2.0);
    let coef = CoefficientPair::new(SpaceTime::constant(1.0), SpaceTime::constant(0.0));
    let mu = SpectralMeasure::white_noise(1);
    let a = random_field_solution(&k, &[], &coef, &mu, 1.0, &[0.0], 1, 42, &sim_opts(0.05)).unwrap();
    let b = random_field_solution(&k, &[], &coef, &mu, 1.0, &[0.0], 1, 42, &sim_opts(0.05)).unwrap();
    let c = random_field_solution(&k, &[], &coef, &mu, 1.0, &[0.0], 1, 43, &sim_opts(0.05)).unwrap();
    assert_eq!(a.samples, b.samples);
    assert_ne!(a.samples, c.samples);
    assert!(random_field_solution(&k, &[], &coef, &mu, 3.0, &[0.0], 1, 42, &sim_opts(0.05)).is_err());
}

#[test]
fn monte_carlo_matches_the_discrete_isometry() {
    let k = WaveKernel::new(&grid(2.0 * PI, 32), 2.0);
    let coef = CoefficientPair::new(SpaceTime::from_expr("1 + 0.5*cos(x1)").unwrap(), SpaceTime::constant(0.0));
    let r = random_field_solution(&k, &[], &coef, &SpectralMeasure::white_noise(1), 1.0, &[0.2], 2000, 11, &sim_opts(0.05)).unwrap();
    assert!(r.mean.abs() < 4.0 * r.std_error, "mean {} se {}", r.mean, r.std_error);
    assert!((r.variance - r.discrete_variance).abs() < 4.0 * r.variance_se, "{} vs {} (se {})", r.variance, r.discrete_variance, r.variance_se);
    // the admissibility value bounds the second moment of the continuous model
    assert!(r.a1.verdict.is_finite() && r.discrete_variance <= r.a1.value * 1.05);
}
