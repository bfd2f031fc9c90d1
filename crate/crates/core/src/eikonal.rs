//! Phase functions and the eikonal solver. Closed-form phases
//! x.xi - int_s^t lambda(theta, xi) dtheta are used when the root does not
//! depend on x; otherwise (d = 1) phases are built from bicharacteristics.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex, OnceLock};

use log::warn;

use crate::error::{Error, Result};
use crate::grid::{japanese_bracket, norm, Grid};
use crate::quad::CompositeRule;
use crate::symbol::{SampleCloud, Symbol};

pub type ShiftFn = dyn Fn(f64, f64, &[f64]) -> f64 + Send + Sync;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseKind {
    Linear,
    ClosedForm,
    Characteristics,
}

#[derive(Clone)]
pub struct PhaseFunction {
    dim: usize,
    kind: PhaseKind,
    horizon: f64,
    shift: Option<Arc<ShiftFn>>,
    shift_dt: Option<Arc<ShiftFn>>,
    rays: Option<Arc<RayField>>,
}

impl fmt::Debug for PhaseFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PhaseFunction").field("dim", &self.dim).field("kind", &self.kind).field("horizon", &self.horizon).finish()
    }
}

const XI_REL_STEP: f64 = 1e-5;

impl PhaseFunction {
    /// phi = x.xi, the PDO phase.
    pub fn linear(dim: usize) -> PhaseFunction {
        PhaseFunction { dim, kind: PhaseKind::Linear, horizon: f64::INFINITY, shift: None, shift_dt: None, rays: None }
    }

    /// phi = x.xi - psi(t, s, xi) with d/dt psi supplied separately.
    pub fn shifted(
        dim: usize,
        psi: impl Fn(f64, f64, &[f64]) -> f64 + Send + Sync + 'static,
        psi_dt: impl Fn(f64, f64, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> PhaseFunction {
        PhaseFunction {
            dim,
            kind: PhaseKind::ClosedForm,
            horizon: f64::INFINITY,
            shift: Some(Arc::new(psi)),
            shift_dt: Some(Arc::new(psi_dt)),
            rays: None,
        }
    }

    /// x.xi -+ (t - s) c |xi|.
    pub fn transport(dim: usize, speed: f64) -> PhaseFunction {
        PhaseFunction::shifted(dim, move |t, s, xi| speed * (t - s) * norm(xi), move |_, _, xi| speed * norm(xi))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> PhaseKind {
        self.kind
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// True when phi - x.xi does not depend on x, so FIOs with this phase
    /// and x-independent symbols are Fourier multipliers.
    pub fn is_shift(&self) -> bool {
        matches!(self.kind, PhaseKind::Linear | PhaseKind::ClosedForm)
    }

    /// psi(t, s, xi) = x.xi - phi for shift phases.
    pub fn shift(&self, t: f64, s: f64, xi: &[f64]) -> f64 {
        match &self.shift {
            Some(f) => f(t, s, xi),
            None => 0.0,
        }
    }

    pub fn eval(&self, t: f64, s: f64, x: &[f64], xi: &[f64]) -> f64 {
        let lin: f64 = x.iter().zip(xi).map(|(a, b)| a * b).sum();
        match self.kind {
            PhaseKind::Linear => lin,
            PhaseKind::ClosedForm => lin - self.shift(t, s, xi),
            PhaseKind::Characteristics => {
                if t == s {
                    return lin;
                }
                self.rays.as_ref().expect("ray field").value(t, s, x[0], xi[0])
            }
        }
    }

    pub fn grad_x(&self, t: f64, s: f64, x: &[f64], xi: &[f64]) -> Vec<f64> {
        match self.kind {
            PhaseKind::Linear | PhaseKind::ClosedForm => xi.to_vec(),
            PhaseKind::Characteristics => {
                if t == s {
                    return xi.to_vec();
                }
                vec![self.rays.as_ref().expect("ray field").slope(t, s, x[0], xi[0])]
            }
        }
    }

    pub fn grad_xi(&self, t: f64, s: f64, x: &[f64], xi: &[f64]) -> Vec<f64> {
        match self.kind {
            PhaseKind::Linear => x.to_vec(),
            PhaseKind::ClosedForm => {
                let h = XI_REL_STEP * japanese_bracket(xi);
                (0..self.dim)
                    .map(|j| {
                        let mut a = xi.to_vec();
                        let mut b = xi.to_vec();
                        a[j] += h;
                        b[j] -= h;
                        x[j] - (self.shift(t, s, &a) - self.shift(t, s, &b)) / (2.0 * h)
                    })
                    .collect()
            }
            PhaseKind::Characteristics => {
                // degree-one homogeneity in d = 1: phi = |xi| Phi_sgn(x)
                if xi[0] == 0.0 || t == s {
                    return x.to_vec();
                }
                let unit = xi[0].signum();
                vec![unit * self.rays.as_ref().expect("ray field").value(t, s, x[0], unit)]
            }
        }
    }

    /// Row-major d x d Hessian in xi.
    pub fn hess_xi(&self, t: f64, s: f64, x: &[f64], xi: &[f64]) -> Vec<f64> {
        let d = self.dim;
        match self.kind {
            PhaseKind::Linear => vec![0.0; d * d],
            PhaseKind::Characteristics => vec![0.0; d * d],
            PhaseKind::ClosedForm => {
                let h = 1e-3 * japanese_bracket(xi);
                let mut out = vec![0.0; d * d];
                for j in 0..d {
                    let mut a = xi.to_vec();
                    let mut b = xi.to_vec();
                    a[j] += h;
                    b[j] -= h;
                    let ga = self.grad_xi(t, s, x, &a);
                    let gb = self.grad_xi(t, s, x, &b);
                    for k in 0..d {
                        out[k * d + j] = (ga[k] - gb[k]) / (2.0 * h);
                    }
                }
                out
            }
        }
    }

    /// Row-major d x d Hessian in x.
    pub fn hess_x(&self, t: f64, s: f64, x: &[f64], xi: &[f64]) -> Vec<f64> {
        let d = self.dim;
        match self.kind {
            PhaseKind::Linear | PhaseKind::ClosedForm => vec![0.0; d * d],
            PhaseKind::Characteristics => {
                let h = 1e-4;
                let a = self.grad_x(t, s, &[x[0] + h], xi)[0];
                let b = self.grad_x(t, s, &[x[0] - h], xi)[0];
                vec![(a - b) / (2.0 * h)]
            }
        }
    }

    /// d/dt phi.
    pub fn dt(&self, t: f64, s: f64, x: &[f64], xi: &[f64]) -> f64 {
        match self.kind {
            PhaseKind::Linear => 0.0,
            PhaseKind::ClosedForm => -(self.shift_dt.as_ref().expect("closed form"))(t, s, xi),
            PhaseKind::Characteristics => {
                let h = 1e-4;
                let f = |u: f64| self.eval(u, s, x, xi);
                (f(t - 2.0 * h) - 8.0 * f(t - h) + 8.0 * f(t + h) - f(t + 2.0 * h)) / (12.0 * h)
            }
        }
    }
}

/// A phase frozen at (t, s), for lattice loops that evaluate it many times.
pub struct PhaseAt {
    phase: PhaseFunction,
    t: f64,
    s: f64,
    table: Option<Arc<RayTable>>,
}

impl PhaseAt {
    pub fn eval(&self, x: &[f64], xi: &[f64]) -> f64 {
        match (&self.table, &self.phase.rays) {
            (Some(tab), Some(rays)) => rays.value_in(tab, x[0], xi[0]),
            _ => self.phase.eval(self.t, self.s, x, xi),
        }
    }
}

impl PhaseFunction {
    pub fn at(&self, t: f64, s: f64) -> PhaseAt {
        let table = match (&self.rays, self.kind) {
            (Some(r), PhaseKind::Characteristics) if t != s => Some(r.table(t, s)),
            _ => None,
        };
        PhaseAt { phase: self.clone(), t, s, table }
    }
}

/// Options of the bicharacteristic solver.
#[derive(Debug, Clone, Copy)]
pub struct RayOptions {
    /// RK4 steps per (t, s) interval.
    pub steps: usize,
    /// Ray origins per period, as a multiple of the grid size.
    pub rays_per_point: usize,
    /// Jacobian threshold dX/dx0 that marks a caustic.
    pub jacobian_min: f64,
}

impl Default for RayOptions {
    fn default() -> Self {
        RayOptions { steps: 200, rays_per_point: 8, jacobian_min: 0.1 }
    }
}

/// Ray endpoints for unit initial frequency of one sign.
#[derive(Debug, Clone)]
struct RaySheet {
    x: Vec<f64>,
    phi: Vec<f64>,
    slope: Vec<f64>,
    unit: f64,
    min_jacobian: f64,
}

#[derive(Debug)]
struct RayTable {
    plus: RaySheet,
    minus: RaySheet,
}

/// Ray states sampled on a uniform grid of tau = t - s for autonomous roots.
#[derive(Debug)]
struct Flow {
    step: f64,
    half: usize,
    // [sign][ray * (2 half + 1) + node] = (x, xi, phi, x', xi', phi')
    states: [Vec<[f64; 6]>; 2],
}

/// Bicharacteristic phase field for d = 1 roots lambda(t, x, xi), cached per (t, s).
///
/// For t-independent roots the rays are integrated once over
/// [-span, span] and sampled with cubic Hermite dense output.
pub struct RayField {
    lambda: Symbol,
    period: f64,
    origins: Vec<f64>,
    opts: RayOptions,
    span: f64,
    flow: OnceLock<Flow>,
    cache: Mutex<HashMap<(u64, u64), Arc<RayTable>>>,
}

impl fmt::Debug for RayField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RayField").field("period", &self.period).field("rays", &self.origins.len()).finish()
    }
}

impl RayField {
    pub fn new(lambda: Symbol, grid: &Grid, opts: RayOptions, span: f64) -> RayField {
        let n = grid.n() * opts.rays_per_point.max(1);
        let l = grid.len();
        let origins = (0..n).map(|i| -0.5 * l + l * i as f64 / n as f64).collect();
        RayField { lambda, period: l, origins, opts, span: span.abs(), flow: OnceLock::new(), cache: Mutex::new(HashMap::new()) }
    }

    fn table(&self, t: f64, s: f64) -> Arc<RayTable> {
        let key = (t.to_bits(), s.to_bits());
        if let Some(tab) = self.cache.lock().expect("cache").get(&key) {
            return tab.clone();
        }
        let tab = Arc::new(self.build_table(t, s));
        self.cache.lock().expect("cache").insert(key, tab.clone());
        tab
    }

    fn build_table(&self, t: f64, s: f64) -> RayTable {
        let tau = t - s;
        if self.lambda.is_t_independent() && self.span > 0.0 && tau.abs() <= self.flow_span() {
            let flow = self.flow.get_or_init(|| self.integrate_flow());
            return RayTable { plus: self.sheet_from_flow(flow, 0, tau), minus: self.sheet_from_flow(flow, 1, tau) };
        }
        RayTable { plus: self.trace(t, s, 1.0).0, minus: self.trace(t, s, -1.0).0 }
    }

    fn flow_span(&self) -> f64 {
        1.05 * self.span + 1e-3
    }

    fn integrate_flow(&self) -> Flow {
        let span = self.flow_span();
        let per_unit = self.opts.steps.max(1) as f64 * 2.0 / self.span.max(1e-12);
        let half = ((span * per_unit).ceil() as usize).max(8);
        let step = span / half as f64;
        let width = 2 * half + 1;
        let n = self.origins.len();
        let mut states: [Vec<[f64; 6]>; 2] = [vec![[0.0; 6]; n * width], vec![[0.0; 6]; n * width]];
        for (si, unit) in [1.0, -1.0].into_iter().enumerate() {
            for (i, &x0) in self.origins.iter().enumerate() {
                let base = i * width;
                let init = (x0, unit, x0 * unit);
                let r0 = self.rhs(0.0, init.0, init.1);
                states[si][base + half] = [init.0, init.1, init.2, r0.0, r0.1, r0.2];
                for dir in [1.0, -1.0] {
                    let mut y = init;
                    for k in 1..=half {
                        y = self.rk4_step(0.0, y, dir * step);
                        let r = self.rhs(0.0, y.0, y.1);
                        let idx = if dir > 0.0 { half + k } else { half - k };
                        states[si][base + idx] = [y.0, y.1, y.2, r.0, r.1, r.2];
                    }
                }
            }
        }
        Flow { step, half, states }
    }

    fn sheet_from_flow(&self, flow: &Flow, si: usize, tau: f64) -> RaySheet {
        let width = 2 * flow.half + 1;
        let pos = tau / flow.step + flow.half as f64;
        let j = (pos.floor() as usize).min(width - 2);
        let u = pos - j as f64;
        let h = flow.step;
        let h00 = 2.0 * u.powi(3) - 3.0 * u * u + 1.0;
        let h10 = u.powi(3) - 2.0 * u * u + u;
        let h01 = -2.0 * u.powi(3) + 3.0 * u * u;
        let h11 = u.powi(3) - u * u;
        let n = self.origins.len();
        let (mut x, mut xi, mut phi) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            let a = flow.states[si][i * width + j];
            let b = flow.states[si][i * width + j + 1];
            let herm = |c: usize| h00 * a[c] + h10 * h * a[c + 3] + h01 * b[c] + h11 * h * b[c + 3];
            x[i] = herm(0);
            xi[i] = herm(1);
            phi[i] = herm(2);
        }
        let unit = if si == 0 { 1.0 } else { -1.0 };
        let min_jacobian = self.jacobian(&x);
        RaySheet { x, phi, slope: xi, unit, min_jacobian }
    }

    fn jacobian(&self, x: &[f64]) -> f64 {
        let n = x.len();
        let dx0 = self.period / n as f64;
        (0..n)
            .map(|i| {
                let next = if i + 1 < n { x[i + 1] } else { x[0] + self.period };
                (next - x[i]) / dx0
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn rk4_step(&self, th: f64, y: (f64, f64, f64), h: f64) -> (f64, f64, f64) {
        let (x0, p0, f0) = y;
        let k1 = self.rhs(th, x0, p0);
        let k2 = self.rhs(th + 0.5 * h, x0 + 0.5 * h * k1.0, p0 + 0.5 * h * k1.1);
        let k3 = self.rhs(th + 0.5 * h, x0 + 0.5 * h * k2.0, p0 + 0.5 * h * k2.1);
        let k4 = self.rhs(th + h, x0 + h * k3.0, p0 + h * k3.1);
        (
            x0 + h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0),
            p0 + h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
            f0 + h / 6.0 * (k1.2 + 2.0 * k2.2 + 2.0 * k3.2 + k4.2),
        )
    }

    fn rhs(&self, theta: f64, x: f64, xi: f64) -> (f64, f64, f64) {
        let lam = self.lambda.eval_raw(theta, &[x], &[xi]).re;
        let dxi = self.lambda.deriv(theta, &[x], &[xi], &[1], &[0]).map(|v| v.re).unwrap_or(f64::NAN);
        let dx = self.lambda.deriv(theta, &[x], &[xi], &[0], &[1]).map(|v| v.re).unwrap_or(f64::NAN);
        (dxi, -dx, xi * dxi - lam)
    }

    /// Integrates all rays of one sign from s to t. Returns the sheet and
    /// the first time the adjacent-ray Jacobian dropped below the threshold.
    fn trace(&self, t: f64, s: f64, unit: f64) -> (RaySheet, Option<f64>) {
        let n = self.origins.len();
        let mut x = self.origins.clone();
        let mut xi = vec![unit; n];
        let mut phi: Vec<f64> = self.origins.iter().map(|x0| x0 * unit).collect();
        let steps = self.opts.steps.max(1);
        let h = (t - s) / steps as f64;
        let mut caustic = None;
        let mut min_jac: f64 = 1.0;
        for k in 0..steps {
            let th = s + k as f64 * h;
            for i in 0..n {
                let y = self.rk4_step(th, (x[i], xi[i], phi[i]), h);
                x[i] = y.0;
                xi[i] = y.1;
                phi[i] = y.2;
            }
            let jac = self.jacobian(&x);
            min_jac = min_jac.min(jac);
            if caustic.is_none() && jac < self.opts.jacobian_min {
                caustic = Some(s + (k + 1) as f64 * h);
            }
        }
        (RaySheet { x, phi, slope: xi, unit, min_jacobian: min_jac }, caustic)
    }

    fn sheet<'a>(&self, tab: &'a RayTable, xi: f64) -> &'a RaySheet {
        if xi >= 0.0 {
            &tab.plus
        } else {
            &tab.minus
        }
    }

    /// Cubic Hermite interpolation of (value, slope) at x, using periodic
    /// continuation X + mL -> Phi + mL xi0.
    fn interp(&self, sheet: &RaySheet, x: f64) -> (f64, f64) {
        let l = self.period;
        let n = sheet.x.len();
        let shift = ((x - sheet.x[0]) / l).floor();
        let xr = x - shift * l;
        // first index with X > xr, in the periodic sense
        let mut j = sheet.x.partition_point(|&v| v <= xr);
        let node = |i: usize| -> (f64, f64, f64) {
            let wrap = (i / n) as f64;
            let k = i % n;
            (sheet.x[k] + wrap * l, sheet.phi[k] + wrap * l * sheet.unit, sheet.slope[k])
        };
        if j == 0 {
            j = 1;
        }
        let (x0, p0, s0) = node(j - 1);
        let (x1, p1, s1) = node(j);
        let hgt = x1 - x0;
        let u = (xr - x0) / hgt;
        let h00 = 2.0 * u.powi(3) - 3.0 * u * u + 1.0;
        let h10 = u.powi(3) - 2.0 * u * u + u;
        let h01 = -2.0 * u.powi(3) + 3.0 * u * u;
        let h11 = u.powi(3) - u * u;
        let val = h00 * p0 + h10 * hgt * s0 + h01 * p1 + h11 * hgt * s1;
        let d00 = (6.0 * u * u - 6.0 * u) / hgt;
        let d10 = 3.0 * u * u - 4.0 * u + 1.0;
        let d01 = (-6.0 * u * u + 6.0 * u) / hgt;
        let d11 = 3.0 * u * u - 2.0 * u;
        let der = d00 * p0 + d10 * s0 + d01 * p1 + d11 * s1;
        (val + shift * l * sheet.unit, der)
    }

    pub fn value(&self, t: f64, s: f64, x: f64, xi: f64) -> f64 {
        if xi == 0.0 {
            return 0.0;
        }
        let tab = self.table(t, s);
        xi.abs() * self.interp(self.sheet(&tab, xi), x).0
    }

    fn value_in(&self, tab: &RayTable, x: f64, xi: f64) -> f64 {
        if xi == 0.0 {
            return 0.0;
        }
        xi.abs() * self.interp(self.sheet(tab, xi), x).0
    }

    pub fn slope(&self, t: f64, s: f64, x: f64, xi: f64) -> f64 {
        if xi == 0.0 {
            return 0.0;
        }
        let tab = self.table(t, s);
        xi.abs() * self.interp(self.sheet(&tab, xi), x).1
    }

    pub fn min_jacobian(&self, t: f64, s: f64) -> f64 {
        let tab = self.table(t, s);
        tab.plus.min_jacobian.min(tab.minus.min_jacobian)
    }
}

/// Solves d_t phi + lambda(t, x, grad_x phi) = 0, phi(s, s) = x.xi.
///
/// x-independent roots get the closed form; roots depending on x are
/// traced along bicharacteristics (d = 1 only). The returned horizon is
/// `t_bar_request` unless a caustic is detected earlier, in which case it
/// is reduced and a warning is logged.
pub fn solve_eikonal(lambda: &Symbol, grid: &Grid, t_bar_request: f64, opts: RayOptions) -> Result<PhaseFunction> {
    let dim = lambda.dim();
    if lambda.is_x_independent() {
        let lam = lambda.clone();
        let phase = if lambda.is_t_independent() {
            let l2 = lam.clone();
            PhaseFunction::shifted(dim, move |t, s, xi| (t - s) * lam.eval(0.0, &[], xi).re, move |_, _, xi| l2.eval(0.0, &[], xi).re)
        } else {
            let l2 = lam.clone();
            PhaseFunction::shifted(
                dim,
                move |t, s, xi| {
                    if t == s {
                        return 0.0;
                    }
                    CompositeRule::new(s, t, 4, 8).integrate(|th| lam.eval(th, &[], xi).re)
                },
                move |t, _, xi| l2.eval(t, &[], xi).re,
            )
        };
        return Ok(PhaseFunction { horizon: t_bar_request, ..phase });
    }
    if dim != 1 {
        return Err(Error::Unsupported(format!(
            "characteristics-built phases are implemented for d = 1 only (got d = {dim}); use x-independent roots"
        )));
    }
    let field = RayField::new(lambda.clone(), grid, opts, t_bar_request);
    let mut horizon = t_bar_request;
    for unit in [1.0, -1.0] {
        if let (_, Some(tc)) = field.trace(t_bar_request, 0.0, unit) {
            horizon = horizon.min(tc);
        }
    }
    if horizon < t_bar_request {
        warn!("caustic detected: phase horizon reduced from {t_bar_request} to {horizon}");
    }
    Ok(PhaseFunction {
        dim,
        kind: PhaseKind::Characteristics,
        horizon,
        shift: None,
        shift_dt: None,
        rays: Some(Arc::new(field)),
    })
}

/// max over the cloud of |d_t phi + lambda(t, x, grad_x phi)| / |xi|, with
/// phi taken at (t, s) for every t in the cloud.
pub fn phase_residual(phase: &PhaseFunction, lambda: &Symbol, cloud: &SampleCloud, s: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for &t in &cloud.ts {
        for x in &cloud.xs {
            for xi in &cloud.xis {
                let r = norm(xi);
                if r == 0.0 {
                    continue;
                }
                let g = phase.grad_x(t, s, x, xi);
                let res = phase.dt(t, s, x, xi) + lambda.eval(t, x, &g).re;
                worst = worst.max(res.abs() / r);
            }
        }
    }
    worst
}
