//! The degenerate example d_t^2 u - t^k d_x^2 u + c t^{k rho} d_x u = f on
//! [0, 1] x R, rho = 1/2 - 1/k: regularized roots, the diagonalized 2x2
//! system, integral inequalities for its symbols and a fitted order of the
//! source operator.
//!
//! Symbols are functions of (t, xi) only, so the system is kept as its own
//! per-frequency type instead of a `FirstOrderSystem`.

use std::sync::Arc;

use nalgebra::Matrix2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::grid::{japanese_bracket, Grid};
use crate::operator::multiplier_row;
use crate::quad::integrate_breaks;
use crate::stochastic::{least_squares_slope, FtMode, SourceKernel};
use crate::symbol::Symbol;

type C = Complex64;
type M2 = Matrix2<C>;

const I: C = C { re: 0.0, im: 1.0 };

fn re(v: f64) -> C {
    C::new(v, 0.0)
}

fn br(xi: f64) -> f64 {
    japanese_bracket(&[xi])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeakHypConfig {
    pub k: u32,
    pub c: f64,
    pub t_max: f64,
}

impl WeakHypConfig {
    pub fn new(k: u32, c: f64) -> Result<WeakHypConfig> {
        WeakHypConfig { k, c, t_max: 1.0 }.validated()
    }

    pub fn validated(self) -> Result<WeakHypConfig> {
        if self.k < 3 {
            return Err(Error::WeakExponent(self.k));
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::Contract(format!("coupling c must be positive, got {}", self.c)));
        }
        if !(self.t_max > 0.0 && self.t_max <= 1.0) {
            return Err(Error::Contract(format!("time horizon must lie in (0, 1], got {}", self.t_max)));
        }
        Ok(self)
    }

    pub fn rho(&self) -> f64 {
        0.5 - 1.0 / self.k as f64
    }
}

/// Symbols of the reduction; every function is defined at t = 0 and xi = 0.
#[derive(Debug, Clone, Copy)]
pub struct WeakSymbols {
    k: f64,
    c: f64,
    rho: f64,
}

impl WeakSymbols {
    pub fn new(cfg: &WeakHypConfig) -> WeakSymbols {
        WeakSymbols { k: cfg.k as f64, c: cfg.c, rho: cfg.rho() }
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    /// t^k + <xi>^-2
    fn q(&self, t: f64, xi: f64) -> f64 {
        t.powf(self.k) + br(xi).powi(-2)
    }

    pub fn zeta(&self, t: f64, xi: f64) -> f64 {
        (1.0 + t.powf(self.k) * br(xi).powi(2)).sqrt()
    }

    pub fn lambda_tilde(&self, t: f64, xi: f64) -> f64 {
        self.q(t, xi).sqrt() * xi.abs()
    }

    pub fn lambda(&self, t: f64, xi: f64) -> f64 {
        t.powf(self.k / 2.0) * xi.abs()
    }

    /// lambda_tilde - lambda in the cancellation-free form.
    pub fn lambda_gap(&self, t: f64, xi: f64) -> f64 {
        br(xi).powi(-2) * xi.abs() / (self.q(t, xi).sqrt() + t.powf(self.k / 2.0))
    }

    pub fn r0(&self, t: f64, xi: f64) -> C {
        I * (self.k * t.powf(self.k - 1.0) / (2.0 * self.q(t, xi)))
    }

    pub fn n0(&self, t: f64, xi: f64) -> C {
        let b = br(xi);
        let q = self.q(t, xi);
        let first = -I * (self.c * t.powf(self.k * self.rho) * xi / (b * q.sqrt()));
        let second = I * (self.k * t.powf(self.k - 1.0) * xi.abs() / (2.0 * q * b));
        let third = re(xi * xi / (b * b * self.zeta(t, xi)));
        first + second + third
    }

    /// <xi> / (2 |xi|), and 0 at xi = 0 where the system is not diagonalized.
    pub fn m(&self, xi: f64) -> f64 {
        if xi == 0.0 {
            0.0
        } else {
            br(xi) / (2.0 * xi.abs())
        }
    }

    /// |lambda_tilde m + m lambda_tilde - zeta| / zeta.
    pub fn q0_residual(&self, t: f64, xi: f64) -> f64 {
        if xi == 0.0 {
            return 0.0;
        }
        let m = self.m(xi);
        let lt = self.lambda_tilde(t, xi);
        let z = self.zeta(t, xi);
        (lt * m + m * lt - z).abs() / z
    }

    /// Undiagonalized matrix A with P = D_t + A acting on (zeta u, (D_t + lambda_tilde) u).
    pub fn first_order_matrix(&self, t: f64, xi: f64) -> M2 {
        let lt = re(self.lambda_tilde(t, xi));
        M2::new(lt + self.r0(t, xi), re(-self.zeta(t, xi)), self.n0(t, xi), -lt)
    }

    /// Remainder after splitting off diag(lambda, -lambda). For xi != 0 this
    /// is R~ + (lambda_tilde - lambda) diag(1, -1) in the diagonalized
    /// variables; at xi = 0 it is the undiagonalized matrix itself.
    pub fn remainder(&self, t: f64, xi: f64) -> M2 {
        if xi == 0.0 {
            return self.first_order_matrix(t, xi);
        }
        let m = re(self.m(xi));
        let r0 = self.r0(t, xi);
        let n0 = self.n0(t, xi);
        let gap = re(self.lambda_gap(t, xi));
        M2::new(r0 - m * n0 + gap, r0 * m - m * n0 * m, n0, n0 * m - gap)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct WeakSystem {
    pub config: WeakHypConfig,
    #[serde(skip)]
    pub symbols: WeakSymbols,
    /// Largest relative Q_0 residual over the build-time sample.
    pub q0_max: f64,
}

const Q0_TOL: f64 = 1e-14;
/// Fraction of the local oscillation period per step.
const STEP_FRACTION: f64 = 0.02;

/// Sets up the reduction and checks that Q_0 vanishes on 100 seeded (t, xi).
pub fn build_weak_system(cfg: WeakHypConfig) -> Result<WeakSystem> {
    let cfg = cfg.validated()?;
    let symbols = WeakSymbols::new(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(0x51_3e);
    let mut q0_max: f64 = 0.0;
    for _ in 0..100 {
        let t: f64 = rng.gen_range(0.0..=cfg.t_max);
        let xi = 10f64.powf(rng.gen_range(-3.0..4.0)) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        q0_max = q0_max.max(symbols.q0_residual(t, xi));
    }
    if q0_max > Q0_TOL {
        return Err(Error::Contract(format!("Q_0 does not vanish: relative residual {q0_max:.3e}")));
    }
    Ok(WeakSystem { config: cfg, symbols, q0_max })
}

fn opnorm(a: &M2) -> f64 {
    // Frobenius bounds the spectral norm and is enough for step control
    a.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

impl WeakSystem {
    fn check_times(&self, s: f64, ts: &[f64]) -> Result<()> {
        let tm = self.config.t_max;
        if s < 0.0 || ts.iter().any(|&t| t < s || t > tm * (1.0 + 1e-12)) {
            return Err(Error::Contract(format!("need 0 <= s <= t <= {tm}, got s={s}, t={ts:?}")));
        }
        Ok(())
    }

    /// Dyson levels Z_0 .. Z_levels (or the resummed series for None) of the
    /// interaction-picture equation Z' = -i Phi^-1 R Phi Z, Z(s) = I,
    /// recorded at each t in ascending `ts`. Returns (Phi(t), levels) pairs.
    fn integrate(&self, s: f64, ts: &[f64], xi: f64, levels: Option<usize>) -> Result<Vec<(M2, Vec<M2>)>> {
        self.check_times(s, ts)?;
        let sy = &self.symbols;
        let p = sy.k / 2.0 + 1.0;
        let a = xi.abs();
        let theta = |tau: f64| a * (tau.powf(p) - s.powf(p)) / p;
        let b = |tau: f64| -> M2 {
            let r = sy.remainder(tau, xi);
            let e = C::from_polar(1.0, 2.0 * theta(tau));
            M2::new(r[(0, 0)], e * r[(0, 1)], r[(1, 0)] / e, r[(1, 1)])
        };
        let nlev = levels.map(|n| n + 1).unwrap_or(1);
        let rhs = |tau: f64, z: &[M2]| -> Vec<M2> {
            let bb = b(tau) * (-I);
            match levels {
                None => vec![bb * z[0]],
                Some(_) => {
                    let mut out = vec![M2::zeros(); z.len()];
                    for v in 1..z.len() {
                        out[v] = bb * z[v - 1];
                    }
                    out
                }
            }
        };
        let t_star = br(xi).powf(-2.0 / sy.k);
        let mut z: Vec<M2> = (0..nlev).map(|v| if v == 0 { M2::identity() } else { M2::zeros() }).collect();
        let mut tau = s;
        let mut out = Vec::with_capacity(ts.len());
        for &target in ts {
            while tau < target {
                let rate = 2.0 * sy.lambda(tau, xi) + opnorm(&sy.remainder(tau, xi));
                let width = tau.max(t_star);
                let h = (STEP_FRACTION / rate.max(1e-300)).min(STEP_FRACTION * width).min(0.01).min(target - tau);
                let k1 = rhs(tau, &z);
                let y2: Vec<M2> = z.iter().zip(&k1).map(|(a, d)| a + d * re(h / 2.0)).collect();
                let k2 = rhs(tau + h / 2.0, &y2);
                let y3: Vec<M2> = z.iter().zip(&k2).map(|(a, d)| a + d * re(h / 2.0)).collect();
                let k3 = rhs(tau + h / 2.0, &y3);
                let y4: Vec<M2> = z.iter().zip(&k3).map(|(a, d)| a + d * re(h)).collect();
                let k4 = rhs(tau + h, &y4);
                for v in 0..nlev {
                    z[v] += (k1[v] + k2[v] * re(2.0) + k3[v] * re(2.0) + k4[v]) * re(h / 6.0);
                }
                tau = if target - tau - h < 1e-15 { target } else { tau + h };
            }
            let th = theta(target);
            let phi = M2::new(C::from_polar(1.0, -th), C::new(0.0, 0.0), C::new(0.0, 0.0), C::from_polar(1.0, th));
            out.push((phi, z.clone()));
        }
        for w in out.iter().map(|(_, z)| z).flatten() {
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { t: s, x: vec![], xi: vec![xi] });
            }
        }
        Ok(out)
    }

    /// E_N(t, s) (or E for `levels` None) of the diagonalized system at xi.
    pub fn propagator(&self, t: f64, s: f64, xi: f64, levels: Option<usize>) -> Result<M2> {
        let (phi, z) = self.integrate(s, &[t], xi, levels)?.remove(0);
        Ok(phi * z.iter().fold(M2::zeros(), |acc, v| acc + v))
    }

    /// Norms of the Dyson levels Z_1 .. Z_levels at (t, s, xi).
    pub fn level_norms(&self, t: f64, s: f64, xi: f64, levels: usize) -> Result<Vec<f64>> {
        let (_, z) = self.integrate(s, &[t], xi, Some(levels))?.remove(0);
        Ok(z[1..].iter().map(opnorm).collect())
    }

    fn source_from(&self, t: f64, xi: f64, e: &M2) -> C {
        let m = re(self.symbols.m(xi));
        let z = self.symbols.zeta(t, xi);
        I / z * (e[(0, 0)] * m - e[(0, 1)] + m * e[(1, 0)] * m - m * e[(1, 1)])
    }

    /// Symbol of the source operator: u(t) = int_0^t T(t, s) f(s) ds.
    pub fn source_symbol(&self, t: f64, s: f64, xi: f64, levels: Option<usize>) -> Result<C> {
        Ok(self.source_symbols(s, &[t], xi, levels)?[0])
    }

    /// Source symbol at several ascending t from one integration.
    pub fn source_symbols(&self, s: f64, ts: &[f64], xi: f64, levels: Option<usize>) -> Result<Vec<C>> {
        let res = self.integrate(s, ts, xi, levels)?;
        Ok(ts
            .iter()
            .zip(res)
            .map(|(&t, (phi, z))| {
                let e = phi * z.iter().fold(M2::zeros(), |acc, v| acc + v);
                self.source_from(t, xi, &e)
            })
            .collect())
    }

    /// int_0^1 ||R(t, xi)|| dt (Frobenius), the scale of the Dyson levels:
    /// ||Z_nu|| <= (int ||R||)^nu / nu!.
    pub fn remainder_integral(&self, xi: f64, t: f64, s: f64) -> Result<f64> {
        let sy = self.symbols;
        let ts = br(xi).powf(-2.0 / sy.k);
        let mut breaks = vec![s];
        for b in [ts / 4.0, ts, 4.0 * ts] {
            if b > s && b < t {
                breaks.push(b);
            }
        }
        breaks.push(t);
        Ok(integrate_breaks(|tau| opnorm(&sy.remainder(tau, xi)), &breaks, 1e-8, 1e-14)?.0)
    }
}

// ---------------------------------------------------------------------------
// Integral inequalities

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum IneqCase {
    /// alpha - beta delta > -1
    Bounded,
    /// alpha - beta delta = -1
    Logarithmic,
    /// alpha - beta delta < -1
    Growing,
}

#[derive(Debug, Clone, Serialize)]
pub struct IntegralBound {
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub bracket: f64,
    pub case: IneqCase,
    pub numeric: f64,
    /// The three-case bound with the constants from the direct splitting proof.
    pub split_bound: f64,
    /// The bound actually asserted: `split_bound`, except in the growing case
    /// with alpha + 1 < delta where the sharp Beta-function constant is used.
    pub bound: f64,
    pub holds: bool,
}

/// int_0^1 t^alpha (t^delta + <xi>^-2)^-beta dt against its three-case bound.
pub fn integral_inequality(alpha: f64, beta: f64, delta: f64, bracket: f64) -> Result<IntegralBound> {
    if !(alpha > 0.0 || alpha == 0.0) || !(beta > 0.0) || !(delta > 0.0) {
        return Err(Error::Contract(format!("need alpha >= 0, beta > 0, delta > 0; got ({alpha}, {beta}, {delta})")));
    }
    if !(bracket >= 1.0) {
        return Err(Error::Contract(format!("<xi> must be at least 1, got {bracket}")));
    }
    let eps = bracket.powi(-2);
    let t_star = eps.powf(1.0 / delta);
    let mut breaks = vec![0.0];
    for b in [t_star / 16.0, t_star, 16.0 * t_star] {
        if b > 0.0 && b < 1.0 {
            breaks.push(b);
        }
    }
    breaks.push(1.0);
    let f = |t: f64| t.powf(alpha) / (t.powf(delta) + eps).powf(beta);
    let (numeric, _) = integrate_breaks(f, &breaks, 1e-10, 0.0)?;
    let e = alpha - beta * delta;
    let (case, split_bound, bound) = if (e + 1.0).abs() < 1e-12 {
        let b = 1.0 / (alpha + 1.0) + (2.0 * beta / (alpha + 1.0)) * bracket.ln();
        (IneqCase::Logarithmic, b, b)
    } else if e > -1.0 {
        let b = 1.0 / (alpha + 1.0) + 1.0 / (e + 1.0);
        (IneqCase::Bounded, b, b)
    } else {
        let growth = bracket.powf(2.0 * (beta * delta - alpha - 1.0) / delta);
        let split = growth / (beta * delta - alpha - 1.0);
        let a = (alpha + 1.0) / delta;
        let bound = if a >= 1.0 { split } else { growth * gamma(a) * gamma(beta - a) / (delta * gamma(beta)) };
        (IneqCase::Growing, split, bound)
    };
    Ok(IntegralBound { alpha, beta, delta, bracket, case, numeric, split_bound, bound, holds: numeric <= bound * (1.0 + 1e-9) })
}

/// int_0^1 (lambda_tilde - lambda)(t, xi) dt.
pub fn lambda_gap_integral(cfg: &WeakHypConfig, xi: f64) -> Result<f64> {
    let sy = WeakSymbols::new(cfg);
    let ts = br(xi).powf(-2.0 / sy.k).min(0.5);
    Ok(integrate_breaks(|t| sy.lambda_gap(t, xi), &[0.0, ts, 1.0], 1e-10, 0.0)?.0)
}

fn double_factorial_odd(n: i64) -> f64 {
    let mut acc = 1.0;
    let mut j = n;
    while j > 1 {
        acc *= j as f64;
        j -= 2;
    }
    acc
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|v| v as f64).product()
}

/// l 2^{l+2}
pub fn ratio_cap(l: usize) -> f64 {
    l as f64 * 2f64.powi(l as i32 + 2)
}

/// 2 l l! (2l - 1)!!
pub fn drift_cap(l: usize) -> f64 {
    2.0 * l as f64 * factorial(l) * double_factorial_odd(2 * l as i64 - 1)
}

#[derive(Debug, Clone, Serialize)]
pub struct LemmaRow {
    pub lemma: String,
    pub k: u32,
    pub l: usize,
    pub bracket: f64,
    pub integral: f64,
    pub bound: f64,
    pub holds: bool,
    /// bound / integral
    pub margin: f64,
}

fn lemma_integrand(cfg: &WeakHypConfig, which: &str) -> Symbol {
    let k = cfg.k as f64;
    let rho = cfg.rho();
    let f: Box<dyn Fn(f64, f64) -> f64 + Send + Sync> = match which {
        "ratio/j=0" => Box::new(move |t, xi| t.powf(k) / (t.powf(k) + br(xi).powi(-2))),
        "ratio/j=1" => Box::new(move |t, xi| t.powf(k - 1.0) / (t.powf(k) + br(xi).powi(-2))),
        _ => Box::new(move |t, xi| t.powf(k * rho) * xi / (1.0 + t.powf(k) * br(xi).powi(2)).sqrt()),
    };
    Symbol::multiplier(1, 0.0, move |t, xi| re(f(t, xi[0]))).with_depth(4)
}

/// int_0^1 |d_xi^l f(t, xi)| dt for the lemma integrands, against
/// C_l <xi>^-l (ratio, j = 0, 1) and C'_l <xi>^-l log(1 + <xi>) (drift).
/// At l = 0 the caps vanish, so the bounds there come from the integral
/// inequality: 1/(k+1) + 1, 1/k + log <xi>^{2/k} and 1 + log <xi>.
pub fn verify_symbol_bounds(cfg: &WeakHypConfig, l_max: usize, brackets: &[f64]) -> Result<Vec<LemmaRow>> {
    let cfg = cfg.validated()?;
    if l_max > 4 {
        return Err(Error::UnsupportedDepth { requested: l_max, depth: 4 });
    }
    let k = cfg.k as f64;
    let mut jobs = Vec::new();
    for which in ["ratio/j=0", "ratio/j=1", "drift"] {
        for &b in brackets {
            for l in 0..=l_max {
                jobs.push((which, b, l));
            }
        }
    }
    jobs.par_iter()
        .map(|&(which, b, l)| {
            if !(b >= 1.0) {
                return Err(Error::Contract(format!("<xi> must be at least 1, got {b}")));
            }
            let xi = (b * b - 1.0).sqrt();
            let sym = lemma_integrand(&cfg, which);
            let g = |t: f64| -> f64 {
                sym.deriv(t, &[0.0], &[xi], &[l], &[0]).map(|v| v.norm()).unwrap_or(f64::NAN)
            };
            let ts = b.powf(-2.0 / k);
            let mut breaks = vec![0.0];
            for v in [ts / 8.0, ts / 2.0, ts, 2.0 * ts, 8.0 * ts] {
                if v < 1.0 {
                    breaks.push(v);
                }
            }
            breaks.push(1.0);
            let (integral, _) = integrate_breaks(g, &breaks, 1e-7, 1e-14)?;
            if !integral.is_finite() {
                return Err(Error::NonFinite { t: 0.0, x: vec![], xi: vec![xi] });
            }
            let bound = match (which, l) {
                ("ratio/j=0", 0) => 1.0 / (k + 1.0) + 1.0,
                ("ratio/j=1", 0) => 1.0 / k + (2.0 / k) * b.ln(),
                ("drift", 0) => 1.0 + b.ln(),
                ("drift", _) => drift_cap(l) * b.powi(-(l as i32)) * (1.0 + b).ln(),
                _ => ratio_cap(l) * b.powi(-(l as i32)),
            };
            Ok(LemmaRow {
                lemma: which.to_string(),
                k: cfg.k,
                l,
                bracket: b,
                integral,
                bound,
                holds: integral <= bound,
                margin: bound / integral,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SeparationMargins {
    /// min over the sample of lambda(t) - (-lambda(t)); zero at t = 0.
    pub true_min: f64,
    /// min of 2 lambda_tilde over the sample.
    pub regularized_min: f64,
    /// min of 2 |xi| / <xi> over the punctured lattice.
    pub regularized_floor: f64,
}

/// Root separation over the lattice without xi = 0 and t in `ts` (include 0
/// to see the degeneracy).
pub fn separation_margins(cfg: &WeakHypConfig, grid: &Grid, ts: &[f64]) -> Result<SeparationMargins> {
    if grid.dim() != 1 {
        return Err(Error::Contract("the weak example is one-dimensional".into()));
    }
    let sy = WeakSymbols::new(cfg);
    let mut m = SeparationMargins { true_min: f64::INFINITY, regularized_min: f64::INFINITY, regularized_floor: f64::INFINITY };
    for kk in 0..grid.total() {
        let xi = grid.xi(kk)[0];
        if xi == 0.0 {
            continue;
        }
        m.regularized_floor = m.regularized_floor.min(2.0 * xi.abs() / br(xi));
        for &t in ts {
            m.true_min = m.true_min.min(2.0 * sy.lambda(t, xi));
            m.regularized_min = m.regularized_min.min(2.0 * sy.lambda_tilde(t, xi));
        }
    }
    Ok(m)
}

// ---------------------------------------------------------------------------
// Order of the source operator

#[derive(Debug, Clone)]
pub struct DeltaOptions {
    /// Dyadic bands 2^j <= |xi| < 2^{j+1}.
    pub bands: std::ops::RangeInclusive<i32>,
    /// Lattice points per sign and band.
    pub per_band: usize,
    pub ss: Vec<f64>,
    pub ts: Vec<f64>,
    pub levels: Option<usize>,
}

impl Default for DeltaOptions {
    fn default() -> Self {
        DeltaOptions { bands: 2..=7, per_band: 12, ss: vec![0.0, 0.25], ts: vec![0.5, 1.0], levels: None }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DeltaFit {
    pub k: u32,
    pub c: f64,
    /// (j, max |T| over the band and the (s, t) probes)
    pub bands: Vec<(i32, f64)>,
    pub slope: f64,
    pub delta_fit: f64,
    /// 1 - delta_fit: the exponent in sup_eta int (1 + |xi + eta|^2)^{-(1 - delta)} dmu.
    pub admissible_nu: f64,
}

/// Least-squares slope of log2 max|T| against the band index j, giving
/// |T| ~ <xi>^{delta - 1}.
pub fn estimate_delta(sys: &WeakSystem, grid: &Grid, opts: &DeltaOptions) -> Result<DeltaFit> {
    if grid.dim() != 1 {
        return Err(Error::Contract("the weak example is one-dimensional".into()));
    }
    let bands: Vec<i32> = opts.bands.clone().collect();
    if bands.len() < 4 {
        return Err(Error::FitFailure(format!("need at least 4 dyadic bands, got {}", bands.len())));
    }
    let dxi = grid.dxi();
    let kmax = grid.n() as i64 / 2 - 1;
    let mut ts = opts.ts.clone();
    ts.sort_by(f64::total_cmp);
    let mut jobs: Vec<(i32, f64, f64)> = Vec::new();
    for &j in &bands {
        let lo = (2f64.powi(j) / dxi).ceil() as i64;
        let hi = ((2f64.powi(j + 1) / dxi).ceil() as i64 - 1).min(kmax);
        if hi < lo || (2f64.powi(j + 1) / dxi).ceil() as i64 - 1 > kmax {
            return Err(Error::FitFailure(format!("band {j} is not covered by the grid (|xi| up to {})", kmax as f64 * dxi)));
        }
        let count = opts.per_band.max(1).min((hi - lo + 1) as usize);
        for q in 0..count {
            let idx = if count == 1 { lo } else { lo + ((hi - lo) as f64 * q as f64 / (count - 1) as f64).round() as i64 };
            for sign in [1.0, -1.0] {
                for &s in &opts.ss {
                    jobs.push((j, sign * idx as f64 * dxi, s));
                }
            }
        }
    }
    let vals: Vec<(i32, f64)> = jobs
        .par_iter()
        .map(|&(j, xi, s)| {
            let t_list: Vec<f64> = ts.iter().copied().filter(|&t| t > s).collect();
            let v = sys.source_symbols(s, &t_list, xi, opts.levels)?;
            Ok((j, v.iter().map(|z| z.norm()).fold(0.0, f64::max)))
        })
        .collect::<Result<_>>()?;
    let band_vals: Vec<(i32, f64)> = bands
        .iter()
        .map(|&j| (j, vals.iter().filter(|v| v.0 == j).map(|v| v.1).fold(0.0, f64::max)))
        .collect();
    for w in band_vals.windows(2) {
        if !(w[1].1 < w[0].1) {
            return Err(Error::FitFailure(format!("band maxima are not decreasing: {:?}", band_vals)));
        }
    }
    let pts: Vec<(f64, f64)> = band_vals.iter().map(|&(j, v)| (j as f64, v.log2())).collect();
    let slope = least_squares_slope(&pts);
    let delta_fit = 1.0 + slope;
    Ok(DeltaFit { k: sys.config.k, c: sys.config.c, bands: band_vals, slope, delta_fit, admissible_nu: 1.0 - delta_fit })
}

/// Source operator of the weak example as a lattice multiplier.
pub struct WeakKernel {
    sys: Arc<WeakSystem>,
    grid: Arc<Grid>,
    levels: Option<usize>,
}

impl WeakKernel {
    pub fn new(sys: Arc<WeakSystem>, grid: &Arc<Grid>, levels: Option<usize>) -> Result<WeakKernel> {
        if grid.dim() != 1 {
            return Err(Error::Contract("the weak example is one-dimensional".into()));
        }
        Ok(WeakKernel { sys, grid: grid.clone(), levels })
    }

    pub fn system(&self) -> &WeakSystem {
        &self.sys
    }
}

impl SourceKernel for WeakKernel {
    fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    fn horizon(&self) -> f64 {
        self.sys.config.t_max
    }

    fn order(&self) -> usize {
        2
    }

    fn source_row(&self, t: f64, s: f64, x: &[f64]) -> Result<Vec<C>> {
        let g = &self.grid;
        let syms: Vec<C> = (0..g.total())
            .into_par_iter()
            .map(|k| self.sys.source_symbol(t, s, g.xi(k)[0], self.levels))
            .collect::<Result<_>>()?;
        multiplier_row(g, x, |xi| syms[g.flat_of_lattice(&g.nearest_lattice(xi)).expect("lattice point")])
    }

    fn initial_row(&self, _l: usize, _t: f64, _x: &[f64]) -> Result<Vec<C>> {
        Err(Error::Unsupported("the weak example is posed with zero initial data".into()))
    }

    fn ft_mode(&self) -> FtMode {
        FtMode::Lattice
    }

    fn kernel_ft(&self, _t: f64, _s: f64, _x: &[f64], _xi: &[f64]) -> Result<C> {
        Err(Error::Unsupported("weak kernels only have lattice transforms".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sys(k: u32, c: f64) -> WeakSystem {
        build_weak_system(WeakHypConfig::new(k, c).unwrap()).unwrap()
    }

    #[test]
    fn rejects_k2() {
        assert!(matches!(WeakHypConfig::new(2, 0.1), Err(Error::WeakExponent(2))));
    }

    #[test]
    fn remainder_is_conjugated_system() {
        let s = sys(4, 0.3);
        let sy = s.symbols;
        for &(t, xi) in &[(0.0, 3.0), (0.3, -7.0), (0.9, 0.5), (1.0, 40.0)] {
            let m = re(sy.m(xi));
            let mm = M2::new(re(1.0), m, re(0.0), re(1.0));
            let minv = M2::new(re(1.0), -m, re(0.0), re(1.0));
            let l = re(sy.lambda(t, xi));
            let lhs = minv * sy.first_order_matrix(t, xi) * mm - M2::new(l, re(0.0), re(0.0), -l);
            assert!(opnorm(&(lhs - sy.remainder(t, xi))) < 1e-12 * (1.0 + opnorm(&lhs)));
        }
    }

    #[test]
    fn zero_mode_transport() {
        let s = sys(3, 0.2);
        let v = s.source_symbol(0.8, 0.1, 0.0, None).unwrap();
        assert!((v - re(0.7)).norm() < 1e-9, "{v}");
    }

    #[test]
    fn gap_closed_form_at_t1() {
        let sy = sys(5, 0.1).symbols;
        for xi in [0.5, 3.0, 50.0] {
            let b = br(xi);
            let closed = b.powi(-2) * xi / ((1.0 + b.powi(-2)).sqrt() + 1.0);
            assert!((sy.lambda_gap(1.0, xi) - closed).abs() < 1e-15);
            assert!((sy.lambda_tilde(1.0, xi) - sy.lambda(1.0, xi) - closed).abs() < 1e-12);
        }
    }
}
