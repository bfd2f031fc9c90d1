//! Truncated fundamental solution E_N of the diagonalized system and the
//! solution operators T_0 .. T_n assembled from it.
//!
//! Two engines share one interface. When the coefficients do not depend on
//! x every operator is a Fourier multiplier, and the W_nu hierarchy reduces
//! to an ODE per lattice frequency. Otherwise (n = 2, d = 1) all operators
//! are dense grid matrices and the nested time integrals are collocated on
//! a composite Gauss-Legendre rule.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use log::warn;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::eikonal::{phase_residual, solve_eikonal, PhaseFunction, RayOptions};
use crate::error::{Error, Result};
use crate::factorization::{FirstOrderSystem, HyperbolicOperator, DEFAULT_C_MIN};
use crate::grid::{forward_ft, inverse_ft, japanese_bracket, norm, Field, Grid, Side};
use crate::operator::{fio_matrix, multiplier_row, GridOperator};
use crate::quad::CompositeRule;
use crate::symbol::{SampleCloud, Symbol};

type CMat = DMatrix<Complex64>;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };
const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };
const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Cancellation tolerance of the eikonal gate, relative to |xi|.
pub const PHASE_TOL: f64 = 1e-6;
/// Remainders below this size are treated as absent.
const REMAINDER_FLOOR: f64 = 1e-13;
/// Largest h * |frequency| allowed in the per-mode RK4 integration.
const RK_RESOLUTION: f64 = 0.05;
/// Band limit of the test fields used for operator norms on the grid.
pub const BAND: i64 = 4;

#[derive(Debug, Clone, Copy)]
pub struct PropagatorOptions {
    /// N in E_N.
    pub truncation: usize,
    /// Gauss-Legendre nodes per panel.
    pub quad_nodes: usize,
    /// Panels of the composite rule.
    pub panels: usize,
}

impl Default for PropagatorOptions {
    fn default() -> Self {
        PropagatorOptions { truncation: 4, quad_nodes: 8, panels: 2 }
    }
}

/// W_1 = -i P-tilde I_phi, the residual left by phase transport.
#[derive(Clone, Debug)]
pub struct Residual {
    sys: FirstOrderSystem,
    phases: Vec<PhaseFunction>,
    horizon: f64,
    vanishing: bool,
    phase_defect: f64,
}

impl Residual {
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// True when R-tilde is numerically zero, so that W_1 = 0 and E = I_phi.
    pub fn is_vanishing(&self) -> bool {
        self.vanishing
    }

    /// Worst eikonal residual over the validation cloud, relative to |xi|.
    pub fn phase_defect(&self) -> f64 {
        self.phase_defect
    }
}

/// Checks that `phases` solve the eikonal equations of the roots of `sys`
/// and packages W_1.
pub fn residual_w1(sys: &FirstOrderSystem, phases: &[PhaseFunction], cloud: &SampleCloud) -> Result<Residual> {
    let n = sys.n();
    if sys.diag.is_none() {
        return Err(Error::Contract("residual_w1 needs a diagonalized system".into()));
    }
    if phases.len() != n {
        return Err(Error::Contract(format!("{} phases for {n} roots", phases.len())));
    }
    let mut defect: f64 = 0.0;
    for (ph, root) in phases.iter().zip(&sys.roots) {
        defect = defect.max(phase_residual(ph, root, cloud, 0.0));
    }
    if !(defect < PHASE_TOL) {
        return Err(Error::InconsistentPhase(defect));
    }
    let horizon = phases.iter().map(|p| p.horizon()).fold(f64::INFINITY, f64::min);
    let vanishing = if sys.is_x_independent() {
        let x0 = vec![0.0; sys.dim()];
        let g = &sys.grid;
        let ts: Vec<f64> = if horizon.is_finite() { (0..5).map(|k| horizon * k as f64 / 4.0).collect() } else { vec![0.0, 1.0] };
        (0..g.total()).into_par_iter().all(|k| {
            let xi = g.xi(k);
            ts.iter().all(|&t| max_abs(&sys.conjugated_remainder(t, &x0, &xi)) < REMAINDER_FLOOR)
        })
    } else {
        if n != 2 || sys.dim() != 1 {
            return Err(Error::Unsupported(format!("x-dependent propagators need n = 2, d = 1 (got n = {n}, d = {})", sys.dim())));
        }
        false
    };
    Ok(Residual { sys: sys.clone(), phases: phases.to_vec(), horizon, vanishing, phase_defect: defect })
}

/// Principal FIO-PDO cancellation symbol
/// b_0 = d_t phi + lambda(x, grad_x phi) - (i/2) sum d_xi_j d_xi_k lambda d_x_j d_x_k phi.
pub fn b0_symbol(phase: &PhaseFunction, lambda: &Symbol, t: f64, s: f64, x: &[f64], xi: &[f64]) -> Result<Complex64> {
    let d = x.len();
    let g = phase.grad_x(t, s, x, xi);
    let hx = phase.hess_x(t, s, x, xi);
    let mut second = ZERO;
    for j in 0..d {
        for k in 0..d {
            if hx[j * d + k] == 0.0 {
                continue;
            }
            let mut alpha = vec![0; d];
            alpha[j] += 1;
            alpha[k] += 1;
            second += lambda.deriv(t, x, &g, &alpha, &vec![0; d])? * hx[j * d + k];
        }
    }
    Ok(phase.dt(t, s, x, xi) + lambda.eval(t, x, &g) - I * 0.5 * second)
}

fn max_abs(m: &CMat) -> f64 {
    m.iter().map(|v| v.norm()).fold(0.0, f64::max)
}

fn spectral_norm(m: &CMat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// exp(c N) for the nilpotent shift N with ones on the superdiagonal.
fn nilpotent_exp(n: usize, c: Complex64) -> CMat {
    let mut out = CMat::identity(n, n);
    let mut term = ONE;
    for k in 1..n {
        term = term * c / k as f64;
        for i in 0..n - k {
            out[(i, i + k)] = term;
        }
    }
    out
}

/// Fitted factorial law w_nu ~ w_1 (C T)^{nu-1} / (nu-1)!.
#[derive(Debug, Clone)]
pub struct FactorialFit {
    pub c: f64,
    pub t_bar: f64,
    /// w_{nu+1} / w_nu for nu = 1, 2, ...
    pub ratios: Vec<f64>,
    /// C T / nu for the same nu.
    pub predicted: Vec<f64>,
    /// Whether w_nu <= 2 w_1 (C T)^{nu-1} / (nu-1)! at every level.
    pub within_gate: bool,
}

impl FactorialFit {
    /// Largest factor between measured and predicted ratios.
    pub fn worst_ratio_factor(&self) -> f64 {
        self.ratios.iter().zip(&self.predicted).map(|(r, p)| (r / p).max(p / r)).fold(1.0, f64::max)
    }
}

pub fn fit_factorial(w: &[f64], t_bar: f64) -> Option<FactorialFit> {
    if w.len() < 2 || w.iter().any(|v| !(*v > 0.0)) || !(t_bar > 0.0) {
        return None;
    }
    let mut lf = 0.0;
    let (mut num, mut den) = (0.0, 0.0);
    for (k, wk) in w.iter().enumerate().skip(1) {
        lf += (k as f64).ln();
        let y = wk.ln() - w[0].ln() + lf;
        num += k as f64 * y;
        den += (k * k) as f64;
    }
    let ct = (num / den).exp();
    let c = ct / t_bar;
    let ratios: Vec<f64> = w.windows(2).map(|p| p[1] / p[0]).collect();
    let predicted: Vec<f64> = (1..w.len()).map(|nu| ct / nu as f64).collect();
    let mut bound = w[0];
    let mut within_gate = true;
    for (k, wk) in w.iter().enumerate().skip(1) {
        bound *= ct / k as f64;
        within_gate &= *wk <= 2.0 * bound * (1.0 + 1e-12);
    }
    Some(FactorialFit { c, t_bar, ratios, predicted, within_gate })
}

// ---------------------------------------------------------------------------
// Multiplier engine

struct MultiplierEngine {
    sys: FirstOrderSystem,
    phases: Vec<PhaseFunction>,
    truncation: usize,
    vanishing: bool,
    x0: Vec<f64>,
    cache: Mutex<HashMap<(u64, u64), Arc<Vec<CMat>>>>,
}

impl MultiplierEngine {
    fn n(&self) -> usize {
        self.sys.n()
    }

    fn phase_matrix(&self, t: f64, s: f64, xi: &[f64]) -> CMat {
        let n = self.n();
        if norm(xi) == 0.0 {
            return nilpotent_exp(n, I * (t - s));
        }
        CMat::from_diagonal(&DVector::from_iterator(n, self.phases.iter().map(|p| Complex64::from_polar(1.0, -p.shift(t, s, xi)))))
    }

    fn remainder(&self, t: f64, xi: &[f64]) -> CMat {
        self.sys.conjugated_remainder(t, &self.x0, xi)
    }

    /// Y_0 .. Y_levels at t, with Y_0 = I_phi(t, s) and
    /// Y_nu = int_s^t I_phi(t, r) W_nu(r, s) dr.
    fn dyson(&self, t: f64, s: f64, xi: &[f64], levels: usize) -> Vec<CMat> {
        let n = self.n();
        let y0 = self.phase_matrix(t, s, xi);
        let mut out = vec![y0.clone()];
        if levels == 0 {
            return out;
        }
        if self.vanishing || t == s {
            out.extend((0..levels).map(|_| CMat::zeros(n, n)));
            return out;
        }
        let zero_mode = norm(xi) == 0.0;
        let t_indep = self.sys.op.is_t_independent();
        let r_const = if t_indep { Some(self.remainder(s, xi)) } else { None };
        let lam = |th: f64| -> Vec<f64> { self.sys.roots.iter().map(|r| r.eval(th, &self.x0, xi).re).collect() };
        let lam_max = [s, 0.5 * (s + t), t].iter().flat_map(|&th| lam(th)).map(f64::abs).fold(0.0, f64::max);
        let r_size = r_const.as_ref().map(max_abs).unwrap_or_else(|| max_abs(&self.remainder(s, xi)));
        let span = t - s;
        let steps = ((span.abs() * (2.0 * lam_max + r_size) / RK_RESOLUTION).ceil() as usize).max(8);
        let h = span / steps as f64;

        let rhs = |th: f64, psi: &[f64], z: &[CMat]| -> (Vec<f64>, Vec<CMat>) {
            let (ph, inv) = if zero_mode {
                (nilpotent_exp(n, I * (th - s)), nilpotent_exp(n, -I * (th - s)))
            } else {
                (
                    CMat::from_diagonal(&DVector::from_iterator(n, psi.iter().map(|p| Complex64::from_polar(1.0, -p)))),
                    CMat::from_diagonal(&DVector::from_iterator(n, psi.iter().map(|p| Complex64::from_polar(1.0, *p)))),
                )
            };
            let r = match &r_const {
                Some(r) => r.clone(),
                None => self.remainder(th, xi),
            };
            let a = inv * r * ph * (-I);
            let mut dz = Vec::with_capacity(z.len());
            dz.push(a.clone());
            for k in 1..z.len() {
                dz.push(&a * &z[k - 1]);
            }
            (lam(th), dz)
        };

        let mut psi = vec![0.0; n];
        let mut z: Vec<CMat> = (0..levels).map(|_| CMat::zeros(n, n)).collect();
        let axpy = |psi: &[f64], z: &[CMat], c: f64, dp: &[f64], dz: &[CMat]| -> (Vec<f64>, Vec<CMat>) {
            (
                psi.iter().zip(dp).map(|(a, b)| a + c * b).collect(),
                z.iter().zip(dz).map(|(a, b)| a + b * Complex64::new(c, 0.0)).collect(),
            )
        };
        for k in 0..steps {
            let th = s + k as f64 * h;
            let (p1, z1) = rhs(th, &psi, &z);
            let (ps, zs) = axpy(&psi, &z, 0.5 * h, &p1, &z1);
            let (p2, z2) = rhs(th + 0.5 * h, &ps, &zs);
            let (ps, zs) = axpy(&psi, &z, 0.5 * h, &p2, &z2);
            let (p3, z3) = rhs(th + 0.5 * h, &ps, &zs);
            let (ps, zs) = axpy(&psi, &z, h, &p3, &z3);
            let (p4, z4) = rhs(th + h, &ps, &zs);
            for j in 0..n {
                psi[j] += h / 6.0 * (p1[j] + 2.0 * p2[j] + 2.0 * p3[j] + p4[j]);
            }
            let c6 = Complex64::new(h / 6.0, 0.0);
            let c3 = Complex64::new(h / 3.0, 0.0);
            for l in 0..levels {
                z[l] += &z1[l] * c6 + &z2[l] * c3 + &z3[l] * c3 + &z4[l] * c6;
            }
        }
        out.extend(z.iter().map(|zl| &y0 * zl));
        out
    }

    fn e_n(&self, t: f64, s: f64, xi: &[f64], levels: usize) -> CMat {
        let ys = self.dyson(t, s, xi, levels);
        ys.iter().skip(1).fold(ys[0].clone(), |acc, y| acc + y)
    }

    fn w_levels(&self, t: f64, s: f64, xi: &[f64], levels: usize) -> Vec<CMat> {
        let r = self.remainder(t, xi) * (-I);
        self.dyson(t, s, xi, levels.saturating_sub(1)).iter().map(|y| &r * y).collect()
    }

    /// E_N(t, s, xi) at every lattice frequency.
    fn lattice(&self, t: f64, s: f64) -> Arc<Vec<CMat>> {
        let key = (t.to_bits(), s.to_bits());
        if let Some(v) = self.cache.lock().expect("cache").get(&key) {
            return v.clone();
        }
        let g = &self.sys.grid;
        let v: Vec<CMat> = (0..g.total()).into_par_iter().map(|k| self.e_n(t, s, &g.xi(k), self.truncation)).collect();
        let v = Arc::new(v);
        self.cache.lock().expect("cache").insert(key, v.clone());
        v
    }
}

// ---------------------------------------------------------------------------
// Dense engine (n = 2, d = 1)

struct Collocation {
    rule: CompositeRule,
    /// x[nu - 1][k] = W_nu(theta_k, s).
    x: Vec<Vec<CMat>>,
}

struct DenseEngine {
    sys: FirstOrderSystem,
    phases: Vec<PhaseFunction>,
    opts: PropagatorOptions,
    horizon: f64,
    grid: Arc<Grid>,
    p0: CMat,
    band: CMat,
    bracket: CMat,
    bracket_inv: CMat,
    psp: Mutex<HashMap<u64, Arc<CMat>>>,
    colloc: Mutex<HashMap<u64, Arc<Collocation>>>,
}

fn pdo_matrix(g: &Arc<Grid>, p: impl Fn(&[f64], &[f64]) -> Complex64 + Sync) -> Result<CMat> {
    fio_matrix(g, |x, xi| {
        let lin: f64 = x.iter().zip(xi).map(|(a, b)| a * b).sum();
        Ok(Complex64::from_polar(1.0, lin) * p(x, xi))
    })
}

fn blocks(a: &CMat, b: &CMat, c: &CMat, d: &CMat) -> CMat {
    let m = a.nrows();
    let mut out = CMat::zeros(2 * m, 2 * m);
    out.view_mut((0, 0), (m, m)).copy_from(a);
    out.view_mut((0, m), (m, m)).copy_from(b);
    out.view_mut((m, 0), (m, m)).copy_from(c);
    out.view_mut((m, m), (m, m)).copy_from(d);
    out
}

const FD_T: f64 = 1e-4;

impl DenseEngine {
    fn new(res: &Residual, opts: PropagatorOptions) -> Result<DenseEngine> {
        let grid = res.sys.grid.clone();
        let m = grid.total();
        let p0 = CMat::from_element(m, m, Complex64::new(1.0 / m as f64, 0.0));
        let ks: Vec<i64> = (-BAND..=BAND).filter(|k| grid.slot(*k).is_some()).collect();
        let nb = ks.len();
        let mut band = CMat::zeros(2 * m, 2 * nb);
        let scale = 1.0 / (m as f64).sqrt();
        for (c, &k) in ks.iter().enumerate() {
            let w = 2.0 * std::f64::consts::PI * k as f64 / grid.len();
            for j in 0..m {
                let e = Complex64::from_polar(scale, w * grid.coord(j));
                band[(j, c)] = e;
                band[(m + j, nb + c)] = e;
            }
        }
        let bracket = pdo_matrix(&grid, |_, xi| Complex64::new(japanese_bracket(xi), 0.0))?;
        let bracket_inv = pdo_matrix(&grid, |_, xi| Complex64::new(1.0 / japanese_bracket(xi), 0.0))?;
        Ok(DenseEngine {
            sys: res.sys.clone(),
            phases: res.phases.clone(),
            opts,
            horizon: res.horizon,
            grid,
            p0,
            band,
            bracket,
            bracket_inv,
            psp: Mutex::new(HashMap::new()),
            colloc: Mutex::new(HashMap::new()),
        })
    }

    fn m(&self) -> usize {
        self.grid.total()
    }

    fn phase_matrix(&self, t: f64, s: f64) -> Result<CMat> {
        let mut d = Vec::with_capacity(2);
        for ph in &self.phases {
            let at = ph.at(t, s);
            d.push(fio_matrix(&self.grid, |x, xi| Ok(Complex64::from_polar(1.0, at.eval(x, xi))))?);
        }
        let m = self.m();
        Ok(blocks(&d[0], &(&self.p0 * (I * (t - s))), &CMat::zeros(m, m), &d[1]))
    }

    /// D_t I_phi(t, s): symbols d_t phi_j by five-point differences of the
    /// phase itself, plus the zero-mode Jordan term.
    fn dt_phase_matrix(&self, t: f64, s: f64) -> Result<CMat> {
        let mut d = Vec::with_capacity(2);
        for ph in &self.phases {
            let at: Vec<_> = [-2.0, -1.0, 0.0, 1.0, 2.0].iter().map(|k| ph.at(t + k * FD_T, s)).collect();
            d.push(fio_matrix(&self.grid, |x, xi| {
                let v: Vec<f64> = at.iter().map(|a| a.eval(x, xi)).collect();
                let dphi = (v[0] - 8.0 * v[1] + 8.0 * v[3] - v[4]) / (12.0 * FD_T);
                Ok(Complex64::from_polar(dphi, v[2]))
            })?);
        }
        let m = self.m();
        Ok(blocks(&d[0], &self.p0, &CMat::zeros(m, m), &d[1]))
    }

    fn m12(&self, t: f64) -> Result<CMat> {
        let sys = &self.sys;
        pdo_matrix(&self.grid, |x, xi| sys.diagonalizer_at(t, x, xi).0[(0, 1)])
    }

    fn diagonalizer(&self, t: f64) -> Result<(CMat, CMat)> {
        let m = self.m();
        let a = self.m12(t)?;
        let id = CMat::identity(m, m);
        let z = CMat::zeros(m, m);
        Ok((blocks(&id, &a, &z, &id), blocks(&id, &(-a), &z, &id)))
    }

    /// M^{-1}(K + R)M + M^{-1} D_t M on the grid.
    fn system_matrix(&self, t: f64) -> Result<Arc<CMat>> {
        if let Some(v) = self.psp.lock().expect("cache").get(&t.to_bits()) {
            return Ok(v.clone());
        }
        let g = &self.grid;
        let sys = &self.sys;
        let dx = g.h() / 4.0;
        let l1 = pdo_matrix(g, |x, xi| sys.roots[0].eval(t, x, xi))?;
        let l2 = pdo_matrix(g, |x, xi| sys.roots[1].eval(t, x, xi))?;
        let sp = sys.op.spatial_symbol(dx);
        let psp = pdo_matrix(g, |x, xi| sp.eval(t, x, xi))?;
        let mut s0 = psp - &l2 * &l1;
        let t_indep = sys.op.is_t_independent();
        if !t_indep {
            s0 += pdo_matrix(g, |x, xi| sys.roots[0].dt(t, x, xi))? * I;
        }
        let kr = blocks(&(&self.bracket * &l1 * &self.bracket_inv), &(-&self.bracket), &(&s0 * &self.bracket_inv), &l2);
        let (mm, minv) = self.diagonalizer(t)?;
        let mut out = &minv * kr * &mm;
        if !t_indep {
            let at: Vec<CMat> = [-2.0, -1.0, 1.0, 2.0].iter().map(|k| self.m12(t + k * FD_T)).collect::<Result<_>>()?;
            let da = (&at[0] - &at[1] * Complex64::new(8.0, 0.0) + &at[2] * Complex64::new(8.0, 0.0) - &at[3]) * Complex64::new(1.0 / (12.0 * FD_T), 0.0);
            let m = self.m();
            let z = CMat::zeros(m, m);
            out += &minv * blocks(&z, &(da * (-I)), &z, &z);
        }
        let out = Arc::new(out);
        self.psp.lock().expect("cache").insert(t.to_bits(), out.clone());
        Ok(out)
    }

    fn w1(&self, t: f64, s: f64) -> Result<CMat> {
        let ip = self.phase_matrix(t, s)?;
        let dt = self.dt_phase_matrix(t, s)?;
        Ok((dt + &*self.system_matrix(t)? * ip) * (-I))
    }

    fn collocation(&self, s: f64) -> Result<Arc<Collocation>> {
        if let Some(v) = self.colloc.lock().expect("cache").get(&s.to_bits()) {
            return Ok(v.clone());
        }
        let rule = CompositeRule::new(s, self.horizon, self.opts.panels, self.opts.quad_nodes);
        let q = rule.nodes.len();
        let levels = self.opts.truncation;
        let mut x: Vec<Vec<CMat>> = Vec::with_capacity(levels);
        if levels > 0 {
            let first: Vec<CMat> = rule.nodes.par_iter().map(|&th| self.w1(th, s)).collect::<Result<_>>()?;
            x.push(first);
        }
        if levels > 1 {
            let pairs: Vec<CMat> =
                (0..q * q).into_par_iter().map(|idx| self.w1(rule.nodes[idx / q], rule.nodes[idx % q])).collect::<Result<_>>()?;
            let cum = rule.cumulative_matrix();
            for _ in 1..levels {
                let prev = x.last().expect("level");
                let next: Vec<CMat> = (0..q)
                    .into_par_iter()
                    .map(|i| {
                        let mut acc = CMat::zeros(2 * self.m(), 2 * self.m());
                        for k in 0..q {
                            if cum[i][k] != 0.0 {
                                acc += &pairs[i * q + k] * &prev[k] * Complex64::new(cum[i][k], 0.0);
                            }
                        }
                        acc
                    })
                    .collect();
                x.push(next);
            }
        }
        let c = Arc::new(Collocation { rule, x });
        self.colloc.lock().expect("cache").insert(s.to_bits(), c.clone());
        Ok(c)
    }

    fn check_time(&self, t: f64, s: f64) -> Result<()> {
        if t < s {
            return Err(Error::Contract(format!("propagator needs t >= s (t = {t}, s = {s})")));
        }
        if t > self.horizon * (1.0 + 1e-12) {
            return Err(Error::Horizon { t, horizon: self.horizon });
        }
        Ok(())
    }

    fn e_n(&self, t: f64, s: f64, levels: usize) -> Result<CMat> {
        self.check_time(t, s)?;
        let m = self.m();
        if t == s {
            return Ok(CMat::identity(2 * m, 2 * m));
        }
        let mut e = self.phase_matrix(t, s)?;
        let levels = levels.min(self.opts.truncation);
        if levels == 0 {
            return Ok(e);
        }
        let c = self.collocation(s)?;
        let w = c.rule.weights_up_to(t);
        let terms: Vec<CMat> = (0..w.len())
            .into_par_iter()
            .filter(|&k| w[k] != 0.0)
            .map(|k| {
                let sum = c.x[..levels].iter().skip(1).fold(c.x[0][k].clone(), |acc, lv| acc + &lv[k]);
                Ok(self.phase_matrix(t, c.rule.nodes[k])? * sum * Complex64::new(w[k], 0.0))
            })
            .collect::<Result<_>>()?;
        for term in terms {
            e += term;
        }
        Ok(e)
    }

    fn w_level(&self, nu: usize, t: f64, s: f64) -> Result<CMat> {
        self.check_time(t, s)?;
        if nu == 0 {
            return Err(Error::Contract("W levels start at 1".into()));
        }
        if nu == 1 {
            return self.w1(t, s);
        }
        if nu - 1 > self.opts.truncation {
            return Err(Error::Contract(format!("W_{nu} needs truncation >= {}", nu - 1)));
        }
        let m = self.m();
        if t == s {
            return Ok(CMat::zeros(2 * m, 2 * m));
        }
        let c = self.collocation(s)?;
        let w = c.rule.weights_up_to(t);
        let terms: Vec<CMat> = (0..w.len())
            .into_par_iter()
            .filter(|&k| w[k] != 0.0)
            .map(|k| Ok(self.w1(t, c.rule.nodes[k])? * &c.x[nu - 2][k] * Complex64::new(w[k], 0.0)))
            .collect::<Result<_>>()?;
        Ok(terms.into_iter().fold(CMat::zeros(2 * m, 2 * m), |a, b| a + b))
    }

    fn band_norm(&self, a: &CMat) -> f64 {
        spectral_norm(&(a * &self.band))
    }
}

// ---------------------------------------------------------------------------

enum Engine {
    Multiplier(MultiplierEngine),
    Dense(DenseEngine),
}

/// E_N(t, s) = I_phi(t, s) + int_s^t I_phi(t, r) sum_{nu <= N} W_nu(r, s) dr.
pub struct Propagator {
    engine: Engine,
    opts: PropagatorOptions,
    horizon: f64,
    level_norms: Vec<f64>,
    fit: Option<FactorialFit>,
    vanishing: bool,
}

impl std::fmt::Debug for Propagator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Propagator")
            .field("dense", &self.is_dense())
            .field("truncation", &self.opts.truncation)
            .field("horizon", &self.horizon)
            .field("level_norms", &self.level_norms)
            .finish()
    }
}

/// Builds E_N and measures w_nu = |W_nu(T, 0)| for nu = 1 .. N + 1. A
/// violated factorial gate is reported as a warning.
pub fn build_propagator(w1: Residual, opts: PropagatorOptions) -> Result<Propagator> {
    if opts.quad_nodes == 0 || opts.panels == 0 {
        return Err(Error::Contract("quadrature needs at least one node and one panel".into()));
    }
    let horizon = w1.horizon;
    let vanishing = w1.vanishing;
    let engine = if w1.sys.is_x_independent() {
        let x0 = vec![0.0; w1.sys.dim()];
        Engine::Multiplier(MultiplierEngine {
            sys: w1.sys,
            phases: w1.phases,
            truncation: opts.truncation,
            vanishing,
            x0,
            cache: Mutex::new(HashMap::new()),
        })
    } else {
        if !horizon.is_finite() {
            return Err(Error::Contract("dense propagators need a finite horizon".into()));
        }
        Engine::Dense(DenseEngine::new(&w1, opts)?)
    };
    let mut prop = Propagator { engine, opts, horizon, level_norms: vec![], fit: None, vanishing };
    if horizon.is_finite() && horizon > 0.0 {
        prop.level_norms = prop.measure_levels(horizon, 0.0)?;
        prop.fit = fit_factorial(&prop.level_norms, horizon);
        if let Some(fit) = &prop.fit {
            if !fit.within_gate {
                warn!(
                    "W_nu norms {:?} exceed the factorial law with fitted C = {:.3}; the series may not settle, try T <= {:.3}",
                    prop.level_norms,
                    fit.c,
                    1.0 / fit.c
                );
            }
        }
    }
    Ok(prop)
}

/// Reduce, diagonalize, solve the eikonal equations and build E_N.
pub fn fundamental_solution(op: &HyperbolicOperator, grid: &Arc<Grid>, t_bar: f64, opts: PropagatorOptions) -> Result<Propagator> {
    fundamental_solution_with(op, grid, t_bar, opts, RayOptions::default())
}

pub fn fundamental_solution_with(
    op: &HyperbolicOperator,
    grid: &Arc<Grid>,
    t_bar: f64,
    opts: PropagatorOptions,
    rays: RayOptions,
) -> Result<Propagator> {
    let ts: Vec<f64> = (0..5).map(|k| t_bar * k as f64 / 4.0).collect();
    let sys = op.reduce(grid, &ts, DEFAULT_C_MIN)?;
    let d = grid.dim();
    let l = grid.len();
    let sep = SampleCloud::new(d, (-0.5 * l, 0.5 * l), if d == 1 { 16 } else { 4 }, 1.0, grid.xi_max().max(1.0), 16, 8, ts.clone());
    let sys = sys.diagonalize(Some(&sep), DEFAULT_C_MIN)?;
    let phases: Vec<PhaseFunction> =
        sys.roots.iter().map(|r| solve_eikonal(r, grid, t_bar, rays)).collect::<Result<_>>()?;
    let horizon = phases.iter().map(|p| p.horizon()).fold(t_bar, f64::min);
    let check_ts: Vec<f64> = (1..=4).map(|k| horizon * k as f64 / 4.0).collect();
    let cloud = SampleCloud::new(d, (-0.5 * l, 0.5 * l), if d == 1 { 12 } else { 2 }, 1.0, grid.xi_max().max(1.0), 6, 4, check_ts);
    let w1 = residual_w1(&sys, &phases, &cloud)?;
    build_propagator(w1, opts)
}

impl Propagator {
    pub fn truncation(&self) -> usize {
        self.opts.truncation
    }

    pub fn options(&self) -> PropagatorOptions {
        self.opts
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// w_1 .. w_{N+1} measured at (T, 0).
    pub fn level_norms(&self) -> &[f64] {
        &self.level_norms
    }

    pub fn fit(&self) -> Option<&FactorialFit> {
        self.fit.as_ref()
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.engine, Engine::Dense(_))
    }

    /// True when W_1 vanishes and E_N = I_phi for every N.
    pub fn is_exact_transport(&self) -> bool {
        self.vanishing
    }

    pub fn system(&self) -> &FirstOrderSystem {
        match &self.engine {
            Engine::Multiplier(e) => &e.sys,
            Engine::Dense(e) => &e.sys,
        }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.system().grid
    }

    pub fn phases(&self) -> &[PhaseFunction] {
        match &self.engine {
            Engine::Multiplier(e) => &e.phases,
            Engine::Dense(e) => &e.phases,
        }
    }

    fn check_time(&self, t: f64, s: f64) -> Result<()> {
        if t < s {
            return Err(Error::Contract(format!("propagator needs t >= s (t = {t}, s = {s})")));
        }
        if t > self.horizon * (1.0 + 1e-12) {
            return Err(Error::Horizon { t, horizon: self.horizon });
        }
        Ok(())
    }

    fn measure_levels(&self, t: f64, s: f64) -> Result<Vec<f64>> {
        let levels = self.opts.truncation + 1;
        match &self.engine {
            Engine::Multiplier(e) => {
                let g = &e.sys.grid;
                let per: Vec<Vec<f64>> = (0..g.total())
                    .into_par_iter()
                    .map(|k| e.w_levels(t, s, &g.xi(k), levels).iter().map(spectral_norm).collect())
                    .collect();
                Ok((0..levels).map(|l| per.iter().map(|v| v[l]).fold(0.0, f64::max)).collect())
            }
            Engine::Dense(e) => (1..=levels).map(|nu| Ok(spectral_norm(&e.w_level(nu, t, s)?))).collect(),
        }
    }

    /// E_N(t, s, xi) for x-independent systems.
    pub fn multiplier(&self, t: f64, s: f64, xi: &[f64]) -> Result<CMat> {
        self.check_time(t, s)?;
        match &self.engine {
            Engine::Multiplier(e) => Ok(e.e_n(t, s, xi, self.opts.truncation)),
            Engine::Dense(_) => Err(Error::Unsupported("x-dependent propagators have no multiplier form".into())),
        }
    }

    /// W_nu(t, s, xi) for x-independent systems.
    pub fn w_multiplier(&self, nu: usize, t: f64, s: f64, xi: &[f64]) -> Result<CMat> {
        self.check_time(t, s)?;
        if nu == 0 {
            return Err(Error::Contract("W levels start at 1".into()));
        }
        match &self.engine {
            Engine::Multiplier(e) => Ok(e.w_levels(t, s, xi, nu).pop().expect("level")),
            Engine::Dense(_) => Err(Error::Unsupported("x-dependent propagators have no multiplier form".into())),
        }
    }

    /// Grid matrix of E_n(t, s) for n <= N on the stacked components.
    pub fn matrix(&self, levels: usize, t: f64, s: f64) -> Result<CMat> {
        self.check_time(t, s)?;
        match &self.engine {
            Engine::Dense(e) => e.e_n(t, s, levels),
            Engine::Multiplier(e) => {
                let g = e.sys.grid.clone();
                let n = e.n();
                let m = g.total();
                let mut out = CMat::zeros(n * m, n * m);
                for c in 0..n {
                    for j in 0..m {
                        let mut comps: Vec<Field> = (0..n).map(|_| Field::zeros(&g, Side::Physical)).collect();
                        comps[c].data_mut()[j] = ONE;
                        let r = self.apply_levels(levels, t, s, &comps)?;
                        for (rc, f) in r.iter().enumerate() {
                            for (i, v) in f.data().iter().enumerate() {
                                out[(rc * m + i, c * m + j)] = *v;
                            }
                        }
                    }
                }
                Ok(out)
            }
        }
    }

    /// Grid matrix of W_nu(t, s).
    pub fn w_matrix(&self, nu: usize, t: f64, s: f64) -> Result<CMat> {
        match &self.engine {
            Engine::Dense(e) => e.w_level(nu, t, s),
            Engine::Multiplier(_) => Err(Error::Unsupported("use w_multiplier for x-independent systems".into())),
        }
    }

    /// Grid matrix of I_phi(t, s).
    pub fn phase_matrix(&self, t: f64, s: f64) -> Result<CMat> {
        match &self.engine {
            Engine::Dense(e) => e.phase_matrix(t, s),
            Engine::Multiplier(_) => Err(Error::Unsupported("use multiplier with truncation 0".into())),
        }
    }

    /// Grid matrix of the zero-order part of the conjugated system at t.
    pub fn system_matrix(&self, t: f64) -> Result<CMat> {
        match &self.engine {
            Engine::Dense(e) => Ok((*e.system_matrix(t)?).clone()),
            Engine::Multiplier(_) => Err(Error::Unsupported("dense matrices are built for x-dependent systems".into())),
        }
    }

    /// Orthonormal band-limited test fields, stacked over both components.
    pub fn band_basis(&self) -> Option<&CMat> {
        match &self.engine {
            Engine::Dense(e) => Some(&e.band),
            Engine::Multiplier(_) => None,
        }
    }

    /// E_N(t, s) applied to the components of V.
    pub fn apply(&self, t: f64, s: f64, v: &[Field]) -> Result<Vec<Field>> {
        self.apply_levels(self.opts.truncation, t, s, v)
    }

    fn apply_levels(&self, levels: usize, t: f64, s: f64, v: &[Field]) -> Result<Vec<Field>> {
        self.check_time(t, s)?;
        let n = self.system().n();
        if v.len() != n {
            return Err(Error::Contract(format!("{} components for an order-{n} system", v.len())));
        }
        match &self.engine {
            Engine::Multiplier(e) => {
                let g = e.sys.grid.clone();
                let fv: Vec<Field> = v.iter().map(forward_ft).collect::<Result<_>>()?;
                let mats: Arc<Vec<CMat>> = if levels == self.opts.truncation {
                    e.lattice(t, s)
                } else {
                    Arc::new((0..g.total()).into_par_iter().map(|k| e.e_n(t, s, &g.xi(k), levels)).collect())
                };
                let mut out: Vec<Field> = (0..n).map(|_| Field::zeros(&g, Side::Spectral)).collect();
                for k in 0..g.total() {
                    for i in 0..n {
                        let val: Complex64 = (0..n).map(|j| mats[k][(i, j)] * fv[j].data()[k]).sum();
                        out[i].data_mut()[k] = val;
                    }
                }
                out.iter().map(inverse_ft).collect()
            }
            Engine::Dense(e) => {
                let x = stack(v)?;
                let y = e.e_n(t, s, levels)? * x;
                unstack(&e.grid, &y, n)
            }
        }
    }

    /// |P-tilde E_n|, measured at t by five-point differences in time with
    /// step `dt`: the band-limited operator norm for dense systems, the
    /// largest lattice norm for multipliers.
    pub fn residual_norm(&self, levels: usize, t: f64, s: f64, dt: f64) -> Result<f64> {
        self.check_time(t + 2.0 * dt, s)?;
        self.check_time(t - 2.0 * dt, s)?;
        let fd = |e: &[CMat]| -> CMat { (&e[0] - &e[1] * Complex64::new(8.0, 0.0) + &e[3] * Complex64::new(8.0, 0.0) - &e[4]) * (-I / (12.0 * dt)) };
        let offsets = [-2.0, -1.0, 0.0, 1.0, 2.0];
        match &self.engine {
            Engine::Dense(e) => {
                let es: Vec<CMat> = offsets.iter().map(|k| e.e_n(t + k * dt, s, levels)).collect::<Result<_>>()?;
                let r = fd(&es) + &*e.system_matrix(t)? * &es[2];
                Ok(e.band_norm(&r))
            }
            Engine::Multiplier(e) => {
                let g = &e.sys.grid;
                let worst = (0..g.total())
                    .into_par_iter()
                    .map(|k| {
                        let xi = g.xi(k);
                        let es: Vec<CMat> = offsets.iter().map(|o| e.e_n(t + o * dt, s, &xi, levels)).collect();
                        let a = e.sys.conjugated_symbol(t, &e.x0, &xi);
                        spectral_norm(&(fd(&es) + a * &es[2]))
                    })
                    .reduce(|| 0.0, f64::max);
                Ok(worst)
            }
        }
    }
}

fn stack(v: &[Field]) -> Result<DVector<Complex64>> {
    let mut data = Vec::new();
    for f in v {
        if f.side() != Side::Physical {
            return Err(Error::Contract("expected physical-side fields".into()));
        }
        data.extend_from_slice(f.data());
    }
    Ok(DVector::from_vec(data))
}

fn unstack(g: &Arc<Grid>, y: &DVector<Complex64>, n: usize) -> Result<Vec<Field>> {
    let m = g.total();
    (0..n).map(|c| Field::from_vec(g, y.as_slice()[c * m..(c + 1) * m].to_vec(), Side::Physical)).collect()
}

/// w_i(x) = N^-d sum_k e^{i (x - x_i) . xi_k}: exact on trigonometric
/// polynomials of the lattice, w = e_i at grid points.
pub fn interpolation_weights(g: &Arc<Grid>, x: &[f64]) -> Vec<Complex64> {
    multiplier_row(g, x, |_| ONE).expect("grid-sized field")
}

// ---------------------------------------------------------------------------

/// u(t) = sum_l T_l(t, s) d_t^l u(s) + int_s^t T_n(t, r) f(r) dr.
#[derive(Clone)]
pub struct SolutionOperators {
    prop: Arc<Propagator>,
}

impl std::fmt::Debug for SolutionOperators {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SolutionOperators").field("prop", &self.prop).finish()
    }
}

pub fn assemble_solution_ops(prop: Propagator) -> SolutionOperators {
    SolutionOperators { prop: Arc::new(prop) }
}

impl SolutionOperators {
    pub fn propagator(&self) -> &Propagator {
        &self.prop
    }

    pub fn order(&self) -> usize {
        self.prop.system().n()
    }

    pub fn horizon(&self) -> f64 {
        self.prop.horizon()
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.prop.grid()
    }

    /// Declared order of T_l: -l for initial data, -(n-1) for the source.
    pub fn declared_order(&self, l: usize) -> f64 {
        let n = self.order();
        -(l.min(n - 1) as f64)
    }

    /// M(t) E_N(t, s) M^{-1}(s) at xi.
    fn transfer(&self, e: &CMat, t: f64, s: f64, xi: &[f64]) -> CMat {
        let sys = self.prop.system();
        let x0 = vec![0.0; sys.dim()];
        let (mt, _) = sys.diagonalizer_at(t, &x0, xi);
        let (_, ms) = sys.diagonalizer_at(s, &x0, xi);
        mt * e * ms
    }

    fn symbol_from(&self, l: usize, f: &CMat, s: f64, xi: &[f64]) -> Complex64 {
        let sys = self.prop.system();
        let n = sys.n();
        let scale = japanese_bracket(xi).powi(1 - n as i32);
        if l == n {
            return I * sys.op.source_sign() * scale * f[(0, n - 1)];
        }
        let b = sys.initial_transform(s, &vec![0.0; sys.dim()], xi);
        let sum: Complex64 = (0..n).map(|j| f[(0, j)] * b[(j, l)]).sum();
        scale * sum * (-I).powu(l as u32)
    }

    /// Symbol of T_l(t, s) at xi (x-independent systems); l = n is the
    /// source operator.
    pub fn symbol(&self, l: usize, t: f64, s: f64, xi: &[f64]) -> Result<Complex64> {
        let n = self.order();
        if l > n {
            return Err(Error::Contract(format!("T_{l} does not exist for order {n}")));
        }
        let e = self.prop.multiplier(t, s, xi)?;
        Ok(self.symbol_from(l, &self.transfer(&e, t, s, xi), s, xi))
    }

    fn multiplier_apply(&self, l: usize, t: f64, s: f64, v: &Field) -> Result<Field> {
        let e = match &self.prop.engine {
            Engine::Multiplier(e) => e,
            Engine::Dense(_) => unreachable!(),
        };
        let mats = e.lattice(t, s);
        let mut fv = forward_ft(v)?;
        let g = fv.grid().clone();
        let vals: Vec<Complex64> = (0..g.total())
            .into_par_iter()
            .map(|k| {
                let xi = g.xi(k);
                self.symbol_from(l, &self.transfer(&mats[k], t, s, &xi), s, &xi)
            })
            .collect();
        for (d, m) in fv.data_mut().iter_mut().zip(vals) {
            *d *= m;
        }
        inverse_ft(&fv)
    }

    fn dense_operator(&self, l: usize, t: f64, s: f64) -> Result<CMat> {
        let e = match &self.prop.engine {
            Engine::Dense(e) => e,
            Engine::Multiplier(_) => unreachable!(),
        };
        let m = e.m();
        let (mt, _) = e.diagonalizer(t)?;
        let (_, ms) = e.diagonalizer(s)?;
        let f = mt * e.e_n(t, s, self.prop.opts.truncation)? * ms;
        let top = f.view((0, 0), (m, 2 * m)).into_owned();
        Ok(match l {
            0 => {
                let g = e.grid.clone();
                let sys = &e.sys;
                let l1 = pdo_matrix(&g, |x, xi| sys.roots[0].eval(s, x, xi))?;
                let mut b = CMat::zeros(2 * m, m);
                b.view_mut((0, 0), (m, m)).copy_from(&e.bracket);
                b.view_mut((m, 0), (m, m)).copy_from(&l1);
                &e.bracket_inv * top * b
            }
            1 => &e.bracket_inv * top.view((0, m), (m, m)) * (-I),
            _ => &e.bracket_inv * top.view((0, m), (m, m)) * (I * e.sys.op.source_sign()),
        })
    }

    fn dense_apply(&self, l: usize, t: f64, s: f64, v: &Field) -> Result<Field> {
        let a = self.dense_operator(l, t, s)?;
        let out = a * DVector::from_column_slice(v.data());
        Field::from_vec(self.grid(), out.as_slice().to_vec(), Side::Physical)
    }

    /// Row r with (T_l(t, s) v)(x) = sum_j r_j v(x_j), for any x in the
    /// box (trigonometric interpolation between grid points).
    pub fn row(&self, l: usize, t: f64, s: f64, x: &[f64]) -> Result<Vec<Complex64>> {
        let n = self.order();
        if l > n {
            return Err(Error::Contract(format!("T_{l} does not exist for order {n}")));
        }
        self.prop.check_time(t, s)?;
        let g = self.grid().clone();
        if self.prop.is_dense() {
            let a = self.dense_operator(l, t, s)?;
            let w = interpolation_weights(&g, x);
            let r = DVector::from_vec(w).transpose() * a;
            return Ok(r.iter().copied().collect());
        }
        let e = match &self.prop.engine {
            Engine::Multiplier(e) => e,
            Engine::Dense(_) => unreachable!(),
        };
        let mats = e.lattice(t, s);
        multiplier_row(&g, x, |xi| {
            let k = g.flat_of_lattice(&g.nearest_lattice(xi)).expect("lattice point");
            self.symbol_from(l, &self.transfer(&mats[k], t, s, xi), s, xi)
        })
    }

    fn apply(&self, l: usize, t: f64, s: f64, v: &Field) -> Result<Field> {
        self.prop.check_time(t, s)?;
        if v.side() != Side::Physical {
            return Err(Error::Contract("expected a physical-side field".into()));
        }
        if self.prop.is_dense() {
            self.dense_apply(l, t, s, v)
        } else {
            self.multiplier_apply(l, t, s, v)
        }
    }

    /// T_l(t, 0) applied to the l-th time derivative of the initial datum.
    pub fn apply_initial(&self, l: usize, t: f64, v: &Field) -> Result<Field> {
        if l >= self.order() {
            return Err(Error::Contract(format!("initial-data operators are T_0 .. T_{}", self.order() - 1)));
        }
        self.apply(l, t, 0.0, v)
    }

    /// T_n(t, s) applied to a source slice.
    pub fn apply_source(&self, t: f64, s: f64, f: &Field) -> Result<Field> {
        self.apply(self.order(), t, s, f)
    }

    /// T_n(t, s) as a grid operator with symbol on all of R^d, for
    /// x-independent systems.
    pub fn source_operator(&self, t: f64, s: f64) -> Result<GridOperator> {
        if self.prop.is_dense() {
            return Err(Error::Unsupported("x-dependent source operators have no closed symbol".into()));
        }
        self.prop.check_time(t, s)?;
        let me = self.clone();
        let d = self.prop.system().dim();
        let order = self.declared_order(self.order());
        let sym = Symbol::multiplier(d, order, move |_, xi| me.symbol(me.order(), t, s, xi).unwrap_or(Complex64::new(f64::NAN, f64::NAN)))
            .time_independent();
        Ok(GridOperator::new(sym, PhaseFunction::linear(d), self.grid()))
    }
}

/// u(t) = sum_l T_l(t) u_l + int_0^t T_n(t, s) f(s) ds, where u_l is the
/// l-th time derivative of the datum at 0 and the time integral uses the
/// composite Gauss-Legendre rule of the propagator.
pub fn duhamel_solve(
    ops: &SolutionOperators,
    u_init: &[Field],
    source: Option<&(dyn Fn(f64) -> Result<Field> + Sync)>,
    t: f64,
) -> Result<Field> {
    let n = ops.order();
    if t > ops.horizon() * (1.0 + 1e-12) {
        return Err(Error::Horizon { t, horizon: ops.horizon() });
    }
    if t < 0.0 {
        return Err(Error::Contract(format!("negative time {t}")));
    }
    if u_init.len() != n {
        return Err(Error::Contract(format!("{} initial data for order {n}", u_init.len())));
    }
    let g = ops.grid().clone();
    let mut u = Field::zeros(&g, Side::Physical);
    for (l, ul) in u_init.iter().enumerate() {
        if ul.max_abs() == 0.0 {
            continue;
        }
        u.axpy(ONE, &ops.apply_initial(l, t, ul)?)?;
    }
    if let Some(f) = source {
        if t > 0.0 {
            let opts = ops.propagator().options();
            let rule = CompositeRule::new(0.0, t, opts.panels, opts.quad_nodes);
            let parts: Vec<Field> = rule
                .nodes
                .par_iter()
                .zip(&rule.weights)
                .map(|(&s, &w)| Ok(ops.apply_source(t, s, &f(s)?)?.scaled(Complex64::new(w, 0.0))))
                .collect::<Result<_>>()?;
            for p in parts {
                u.axpy(ONE, &p)?;
            }
        }
    }
    Ok(u)
}
