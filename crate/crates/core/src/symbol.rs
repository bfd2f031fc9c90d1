//! Symbols p(t, x, xi) of class S^m, their seminorms and the asymptotic
//! composition rules for PDOs and FIOs.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::eikonal::PhaseFunction;
use crate::error::{Error, Result};
use crate::grid::{japanese_bracket, norm, Grid};

pub type SymbolFn = dyn Fn(f64, &[f64], &[f64]) -> Complex64 + Send + Sync;

/// Analytic derivative hook: (t, x, xi, alpha, beta) -> d_xi^alpha d_x^beta p,
/// or `None` to fall back to finite differences.
pub type DerivFn = dyn Fn(f64, &[f64], &[f64], &[usize], &[usize]) -> Option<Complex64> + Send + Sync;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Behaviour at the lattice point xi = 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZeroRule {
    /// The evaluator already returns the continuous extension.
    Continuous,
    /// No extension exists; the value at xi = 0 is forced to zero.
    Flagged,
}

#[derive(Clone)]
pub struct Symbol {
    f: Arc<SymbolFn>,
    deriv: Option<Arc<DerivFn>>,
    dim: usize,
    order: f64,
    depth: usize,
    radius: f64,
    x_independent: bool,
    t_independent: bool,
    zero: ZeroRule,
    dx: f64,
}

impl fmt::Debug for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Symbol")
            .field("dim", &self.dim)
            .field("order", &self.order)
            .field("x_independent", &self.x_independent)
            .field("t_independent", &self.t_independent)
            .field("zero", &self.zero)
            .finish()
    }
}

// Central stencils of fourth order for derivative orders 1..=4, offsets -h..h.
const STENCILS: [&[f64]; 4] = [
    &[1.0 / 12.0, -2.0 / 3.0, 0.0, 2.0 / 3.0, -1.0 / 12.0],
    &[-1.0 / 12.0, 4.0 / 3.0, -5.0 / 2.0, 4.0 / 3.0, -1.0 / 12.0],
    &[1.0 / 8.0, -1.0, 13.0 / 8.0, 0.0, -13.0 / 8.0, 1.0, -1.0 / 8.0],
    &[-1.0 / 6.0, 2.0, -13.0 / 2.0, 28.0 / 3.0, -13.0 / 2.0, 2.0, -1.0 / 6.0],
];
const XI_STEP: [f64; 4] = [1e-4, 2e-3, 5e-3, 1e-2];
pub const MAX_FD_ORDER: usize = 4;

#[derive(Clone, Copy)]
struct Axis {
    on_xi: bool,
    axis: usize,
    order: usize,
    step: f64,
}

impl Symbol {
    pub fn new(dim: usize, order: f64, f: impl Fn(f64, &[f64], &[f64]) -> Complex64 + Send + Sync + 'static) -> Symbol {
        Symbol {
            f: Arc::new(f),
            deriv: None,
            dim,
            order,
            depth: MAX_FD_ORDER,
            radius: 1.0,
            x_independent: false,
            t_independent: false,
            zero: ZeroRule::Continuous,
            dx: 1e-2,
        }
    }

    /// x-independent symbol p(t, xi).
    pub fn multiplier(dim: usize, order: f64, f: impl Fn(f64, &[f64]) -> Complex64 + Send + Sync + 'static) -> Symbol {
        let mut s = Symbol::new(dim, order, move |t, _x, xi| f(t, xi));
        s.x_independent = true;
        s
    }

    pub fn constant(dim: usize, c: Complex64) -> Symbol {
        Symbol::multiplier(dim, 0.0, move |_, _| c).time_independent()
    }

    /// <xi>^r
    pub fn bracket(dim: usize, r: f64) -> Symbol {
        Symbol::multiplier(dim, r, move |_, xi| Complex64::new(japanese_bracket(xi).powf(r), 0.0)).time_independent()
    }

    /// |xi|
    pub fn abs_xi(dim: usize) -> Symbol {
        Symbol::multiplier(dim, 1.0, |_, xi| Complex64::new(norm(xi), 0.0)).time_independent()
    }

    pub fn time_independent(mut self) -> Symbol {
        self.t_independent = true;
        self
    }

    pub fn space_independent(mut self) -> Symbol {
        self.x_independent = true;
        self
    }

    pub fn flagged(mut self) -> Symbol {
        self.zero = ZeroRule::Flagged;
        self
    }

    pub fn with_zero_rule(mut self, z: ZeroRule) -> Symbol {
        self.zero = z;
        self
    }

    pub fn with_depth(mut self, depth: usize) -> Symbol {
        self.depth = depth.min(MAX_FD_ORDER);
        self
    }

    pub fn with_radius(mut self, r: f64) -> Symbol {
        self.radius = r;
        self
    }

    pub fn with_order(mut self, m: f64) -> Symbol {
        self.order = m;
        self
    }

    /// Finite-difference step in x; the default pipeline uses h/4.
    pub fn with_dx(mut self, dx: f64) -> Symbol {
        self.dx = dx;
        self
    }

    pub fn with_grid_step(self, grid: &Grid) -> Symbol {
        let h = grid.h();
        self.with_dx(h / 4.0)
    }

    pub fn with_derivative(mut self, d: impl Fn(f64, &[f64], &[f64], &[usize], &[usize]) -> Option<Complex64> + Send + Sync + 'static) -> Symbol {
        self.deriv = Some(Arc::new(d));
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> f64 {
        self.order
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn is_x_independent(&self) -> bool {
        self.x_independent
    }

    pub fn is_t_independent(&self) -> bool {
        self.t_independent
    }

    pub fn zero_rule(&self) -> ZeroRule {
        self.zero
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn eval(&self, t: f64, x: &[f64], xi: &[f64]) -> Complex64 {
        if self.zero == ZeroRule::Flagged && xi.iter().all(|v| *v == 0.0) {
            return Complex64::new(0.0, 0.0);
        }
        (self.f)(t, x, xi)
    }

    /// Evaluation without the xi = 0 rule, used inside finite differences.
    pub fn eval_raw(&self, t: f64, x: &[f64], xi: &[f64]) -> Complex64 {
        (self.f)(t, x, xi)
    }

    /// d_xi^alpha d_x^beta p at (t, x, xi).
    pub fn deriv(&self, t: f64, x: &[f64], xi: &[f64], alpha: &[usize], beta: &[usize]) -> Result<Complex64> {
        let total: usize = alpha.iter().chain(beta).sum();
        if total == 0 {
            return Ok(self.eval(t, x, xi));
        }
        if total > self.depth || alpha.iter().chain(beta).any(|&k| k > MAX_FD_ORDER) {
            return Err(Error::UnsupportedDepth { requested: total, depth: self.depth });
        }
        if self.x_independent && beta.iter().any(|&b| b > 0) {
            return Ok(Complex64::new(0.0, 0.0));
        }
        if let Some(d) = &self.deriv {
            if let Some(v) = d(t, x, xi, alpha, beta) {
                return Ok(v);
            }
        }
        let bracket = japanese_bracket(xi);
        let mut axes = Vec::new();
        for (a, &k) in alpha.iter().enumerate() {
            if k > 0 {
                axes.push(Axis { on_xi: true, axis: a, order: k, step: bracket * XI_STEP[k - 1] });
            }
        }
        for (a, &k) in beta.iter().enumerate() {
            if k > 0 {
                let step = if k >= 3 { 2.0 * self.dx } else { self.dx };
                axes.push(Axis { on_xi: false, axis: a, order: k, step });
            }
        }
        let mut xs = x.to_vec();
        let mut xis = xi.to_vec();
        Ok(self.fd(t, &mut xs, &mut xis, &axes))
    }

    fn fd(&self, t: f64, x: &mut Vec<f64>, xi: &mut Vec<f64>, axes: &[Axis]) -> Complex64 {
        let Some((ax, rest)) = axes.split_first() else {
            return (self.f)(t, x, xi);
        };
        let stencil = STENCILS[ax.order - 1];
        let half = (stencil.len() / 2) as i64;
        let target = if ax.on_xi { &mut *xi } else { &mut *x };
        let base = target[ax.axis];
        let mut acc = Complex64::new(0.0, 0.0);
        for (j, &c) in stencil.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let off = (j as i64 - half) as f64 * ax.step;
            if ax.on_xi {
                xi[ax.axis] = base + off;
            } else {
                x[ax.axis] = base + off;
            }
            acc += c * self.fd(t, x, xi, rest);
        }
        if ax.on_xi {
            xi[ax.axis] = base;
        } else {
            x[ax.axis] = base;
        }
        acc / ax.step.powi(ax.order as i32)
    }

    /// Time derivative by a five-point stencil; zero for time-independent symbols.
    pub fn dt(&self, t: f64, x: &[f64], xi: &[f64]) -> Complex64 {
        if self.t_independent {
            return Complex64::new(0.0, 0.0);
        }
        let h = 1e-4 * (1.0 + t.abs());
        let f = |s: f64| self.eval_raw(s, x, xi);
        (f(t - 2.0 * h) - 8.0 * f(t - h) + 8.0 * f(t + h) - f(t + 2.0 * h)) / (12.0 * h)
    }

    fn combine(&self, other: &Symbol, order: f64, op: impl Fn(Complex64, Complex64) -> Complex64 + Send + Sync + 'static) -> Symbol {
        let (p, q) = (self.clone(), other.clone());
        let mut s = Symbol::new(self.dim, order, move |t, x, xi| op(p.eval(t, x, xi), q.eval(t, x, xi)));
        s.x_independent = self.x_independent && other.x_independent;
        s.t_independent = self.t_independent && other.t_independent;
        s.zero = merge_zero(self.zero, other.zero);
        s.depth = self.depth.min(other.depth);
        s.radius = self.radius.max(other.radius);
        s.dx = self.dx.min(other.dx);
        s
    }

    pub fn add(&self, other: &Symbol) -> Symbol {
        self.combine(other, self.order.max(other.order), |a, b| a + b)
    }

    pub fn sub(&self, other: &Symbol) -> Symbol {
        self.combine(other, self.order.max(other.order), |a, b| a - b)
    }

    /// Pointwise product (the leading term of the composition).
    pub fn mul(&self, other: &Symbol) -> Symbol {
        self.combine(other, self.order + other.order, |a, b| a * b)
    }

    pub fn scale(&self, c: Complex64) -> Symbol {
        let p = self.clone();
        let mut s = self.clone();
        s.f = Arc::new(move |t, x, xi| c * p.eval(t, x, xi));
        s.deriv = None;
        s
    }

    pub fn map(&self, order: f64, g: impl Fn(Complex64) -> Complex64 + Send + Sync + 'static) -> Symbol {
        let p = self.clone();
        let mut s = self.clone();
        s.order = order;
        s.f = Arc::new(move |t, x, xi| g(p.eval(t, x, xi)));
        s.deriv = None;
        s
    }
}

fn merge_zero(a: ZeroRule, b: ZeroRule) -> ZeroRule {
    if a == ZeroRule::Flagged || b == ZeroRule::Flagged {
        ZeroRule::Flagged
    } else {
        ZeroRule::Continuous
    }
}

/// n x n matrix of symbols sharing (t, x, xi).
#[derive(Clone, Debug)]
pub struct SymbolMatrix {
    n: usize,
    entries: Vec<Symbol>,
}

impl SymbolMatrix {
    pub fn new(n: usize, entries: Vec<Symbol>) -> Result<SymbolMatrix> {
        if entries.len() != n * n {
            return Err(Error::Contract(format!("expected {} entries, got {}", n * n, entries.len())));
        }
        if entries.windows(2).any(|w| w[0].dim != w[1].dim) {
            return Err(Error::Contract("symbol matrix entries disagree on dimension".into()));
        }
        Ok(SymbolMatrix { n, entries })
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> Symbol) -> SymbolMatrix {
        let entries = (0..n * n).map(|k| f(k / n, k % n)).collect();
        SymbolMatrix { n, entries }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> &Symbol {
        &self.entries[i * self.n + j]
    }

    pub fn eval(&self, t: f64, x: &[f64], xi: &[f64]) -> DMatrix<Complex64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j).eval(t, x, xi))
    }

    pub fn orders(&self) -> Vec<f64> {
        self.entries.iter().map(|s| s.order).collect()
    }

    pub fn is_x_independent(&self) -> bool {
        self.entries.iter().all(|s| s.x_independent)
    }
}

/// Deterministic sample cloud for seminorm estimates: x on a tensor grid,
/// |xi| log-spaced in [R, xi_max], and a fixed set of directions.
#[derive(Debug, Clone)]
pub struct SampleCloud {
    pub xs: Vec<Vec<f64>>,
    pub xis: Vec<Vec<f64>>,
    pub ts: Vec<f64>,
}

impl SampleCloud {
    pub fn new(dim: usize, x_range: (f64, f64), n_x: usize, r: f64, xi_max: f64, n_radial: usize, n_dirs: usize, ts: Vec<f64>) -> SampleCloud {
        let axis: Vec<f64> = (0..n_x).map(|j| x_range.0 + (x_range.1 - x_range.0) * j as f64 / n_x as f64).collect();
        let mut xs: Vec<Vec<f64>> = vec![vec![]];
        for _ in 0..dim {
            xs = xs.into_iter().flat_map(|p| axis.iter().map(move |&v| [p.clone(), vec![v]].concat())).collect();
        }
        let radii: Vec<f64> = if n_radial <= 1 || xi_max <= r {
            vec![r]
        } else {
            (0..n_radial).map(|k| r * (xi_max / r).powf(k as f64 / (n_radial - 1) as f64)).collect()
        };
        let dirs = directions(dim, n_dirs);
        let xis = radii.iter().flat_map(|&rad| dirs.iter().map(move |d| d.iter().map(|c| c * rad).collect())).collect();
        SampleCloud { xs, xis, ts }
    }

    /// Default cloud: 32 x-points per axis over the grid box, 64 radii, 16 directions.
    pub fn for_grid(grid: &Grid, r: f64, ts: Vec<f64>) -> SampleCloud {
        let l = grid.len();
        SampleCloud::new(grid.dim(), (-0.5 * l, 0.5 * l), 32, r, grid.xi_max().max(r), 64, 16, ts)
    }

    pub fn xs_for(&self, p: &Symbol) -> &[Vec<f64>] {
        if p.is_x_independent() {
            &self.xs[..1]
        } else {
            &self.xs
        }
    }
}

/// Unit directions: +-1 in d=1, equally spaced angles in d=2, a Fibonacci sphere in d=3.
pub fn directions(dim: usize, n: usize) -> Vec<Vec<f64>> {
    match dim {
        1 => vec![vec![1.0], vec![-1.0]],
        2 => (0..n).map(|k| {
            let a = 2.0 * PI * k as f64 / n as f64;
            vec![a.cos(), a.sin()]
        }).collect(),
        _ => {
            let golden = PI * (3.0 - 5f64.sqrt());
            (0..n).map(|k| {
                let z = 1.0 - 2.0 * (k as f64 + 0.5) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let a = golden * k as f64;
                vec![r * a.cos(), r * a.sin(), z]
            }).collect()
        }
    }
}

/// All multi-indices in N^d with |alpha| <= l.
pub fn multi_indices(dim: usize, l: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..dim {
        out = out
            .into_iter()
            .flat_map(|p: Vec<usize>| {
                let used: usize = p.iter().sum();
                (0..=(l - used)).map(move |k| [p.clone(), vec![k]].concat())
            })
            .collect();
    }
    out
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|v| v as f64).product()
}

fn multi_factorial(alpha: &[usize]) -> f64 {
    alpha.iter().map(|&a| factorial(a)).product()
}

/// Estimate of |p|_{l,R}^{(m)} on the sample cloud.
pub fn seminorm(p: &Symbol, l: usize, r: f64, cloud: &SampleCloud) -> Result<f64> {
    if l > p.depth {
        return Err(Error::UnsupportedDepth { requested: l, depth: p.depth });
    }
    let d = p.dim;
    let mut best: f64 = 0.0;
    for ab in multi_indices(2 * d, l) {
        let (alpha, beta) = ab.split_at(d);
        if p.x_independent && beta.iter().any(|&b| b > 0) {
            continue;
        }
        let a_abs: usize = alpha.iter().sum();
        for &t in &cloud.ts {
            for x in cloud.xs_for(p) {
                for xi in &cloud.xis {
                    if norm(xi) < r {
                        continue;
                    }
                    let v = p.deriv(t, x, xi, alpha, beta)?;
                    let w = japanese_bracket(xi).powf(-p.order + a_abs as f64);
                    best = best.max(v.norm() * w);
                }
            }
        }
    }
    Ok(best)
}

/// Symbol of PQ truncated to sum_{|alpha| < terms} (1/alpha!) d_xi^alpha p D_x^alpha q.
pub fn compose_pdo(p: &Symbol, q: &Symbol, terms: usize) -> Symbol {
    let d = p.dim;
    let idx: Vec<(Vec<usize>, Complex64)> = multi_indices(d, terms.max(1) - 1)
        .into_iter()
        .map(|a| {
            let k: usize = a.iter().sum();
            let c = (-I).powu(k as u32) / multi_factorial(&a);
            (a, c)
        })
        .collect();
    let (pp, qq) = (p.clone(), q.clone());
    let zeros = vec![0usize; d];
    let x_free = q.x_independent;
    let mut s = Symbol::new(d, p.order + q.order, move |t, x, xi| {
        let mut acc = Complex64::new(0.0, 0.0);
        for (a, c) in &idx {
            let k: usize = a.iter().sum();
            if k > 0 && x_free {
                continue;
            }
            let dp = pp.deriv(t, x, xi, a, &zeros).unwrap_or(Complex64::new(f64::NAN, 0.0));
            let dq = qq.deriv(t, x, xi, &zeros, a).unwrap_or(Complex64::new(f64::NAN, 0.0));
            acc += c * dp * dq;
        }
        acc
    });
    s.x_independent = p.x_independent && q.x_independent;
    s.t_independent = p.t_independent && q.t_independent;
    s.zero = merge_zero(p.zero, q.zero);
    s.depth = p.depth.min(q.depth);
    s.radius = p.radius.max(q.radius);
    s.dx = p.dx.min(q.dx);
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// P_phi Q: the FIO acts after the PDO (symbol r1).
    Left,
    /// Q P_phi: the PDO acts after the FIO (symbol r2).
    Right,
}

/// Second-order expansion of the FIO-PDO product symbol. For `Left`, `p`
/// is the FIO symbol and `q` the PDO symbol; for `Right`, `p` is the PDO
/// symbol and `q` the FIO symbol. The phase is taken at (t, s).
pub fn compose_fio_pdo(p: &Symbol, phase: &PhaseFunction, q: &Symbol, side: Side, s: f64) -> Symbol {
    let d = p.dim;
    let (pp, qq, ph) = (p.clone(), q.clone(), phase.clone());
    let unit = |j: usize| {
        let mut e = vec![0usize; d];
        e[j] += 1;
        e
    };
    let pair = |j: usize, k: usize| {
        let mut e = vec![0usize; d];
        e[j] += 1;
        e[k] += 1;
        e
    };
    let units: Vec<Vec<usize>> = (0..d).map(unit).collect();
    let pairs: Vec<(usize, usize, Vec<usize>)> = (0..d).flat_map(|j| (0..d).map(move |k| (j, k))).map(|(j, k)| (j, k, pair(j, k))).collect();
    let zeros = vec![0usize; d];
    let nan = Complex64::new(f64::NAN, 0.0);
    let f = move |t: f64, x: &[f64], xi: &[f64]| -> Complex64 {
        match side {
            Side::Left => {
                let y = ph.grad_xi(t, s, x, xi);
                let hess = ph.hess_xi(t, s, x, xi);
                let pv = pp.eval(t, x, xi);
                let mut acc = pv * qq.eval(t, &y, xi);
                for e in &units {
                    let dp = pp.deriv(t, x, xi, e, &zeros).unwrap_or(nan);
                    let dq = qq.deriv(t, &y, xi, &zeros, e).unwrap_or(nan);
                    acc += dp * (-I) * dq;
                }
                let mut curv = Complex64::new(0.0, 0.0);
                for (j, k, e) in &pairs {
                    let h = hess[j * d + k];
                    if h != 0.0 {
                        let dq = qq.deriv(t, &y, xi, &zeros, e).unwrap_or(nan);
                        curv += -dq * h;
                    }
                }
                acc + 0.5 * I * pv * curv
            }
            Side::Right => {
                let eta = ph.grad_x(t, s, x, xi);
                let hess = ph.hess_x(t, s, x, xi);
                let qv = qq.eval(t, x, xi);
                let mut acc = pp.eval(t, x, &eta) * qv;
                for e in &units {
                    let dp = pp.deriv(t, x, &eta, e, &zeros).unwrap_or(nan);
                    let dq = qq.deriv(t, x, xi, &zeros, e).unwrap_or(nan);
                    acc += dp * (-I) * dq;
                }
                let mut curv = Complex64::new(0.0, 0.0);
                for (j, k, e) in &pairs {
                    let h = hess[j * d + k];
                    if h != 0.0 {
                        curv += pp.deriv(t, x, &eta, e, &zeros).unwrap_or(nan) * h;
                    }
                }
                acc - 0.5 * I * curv * qv
            }
        }
    };
    let mut out = Symbol::new(d, p.order + q.order, f);
    out.x_independent = p.x_independent && q.x_independent && phase.is_shift();
    out.zero = merge_zero(p.zero, q.zero);
    out.depth = p.depth.min(q.depth);
    out.dx = p.dx.min(q.dx);
    out
}

/// Symbol of the adjoint, sum_{|alpha| < terms} (1/alpha!) d_xi^alpha D_x^alpha conj(p).
pub fn adjoint_symbol(p: &Symbol, terms: usize) -> Symbol {
    let d = p.dim;
    let idx: Vec<(Vec<usize>, Complex64)> = multi_indices(d, terms.max(1) - 1)
        .into_iter()
        .map(|a| {
            let k: usize = a.iter().sum();
            ((a.clone()), (-I).powu(k as u32) / multi_factorial(&a))
        })
        .collect();
    let pp = p.clone();
    let x_free = p.x_independent;
    let mut s = Symbol::new(d, p.order, move |t, x, xi| {
        let mut acc = Complex64::new(0.0, 0.0);
        for (a, c) in &idx {
            let k: usize = a.iter().sum();
            if k > 0 && x_free {
                continue;
            }
            let v = pp.deriv(t, x, xi, a, a).unwrap_or(Complex64::new(f64::NAN, 0.0));
            acc += c * v.conj();
        }
        acc
    });
    s.x_independent = p.x_independent;
    s.t_independent = p.t_independent;
    s.zero = p.zero;
    s.depth = p.depth;
    s.dx = p.dx;
    s
}

/// Unitriangular diagonalizer of the bidiagonal matrix with diagonal
/// lambda_j and superdiagonal -scale, together with its exact inverse.
#[derive(Clone, Debug)]
pub struct Diagonalizer {
    pub m: SymbolMatrix,
    pub m_inv: SymbolMatrix,
}

fn diagonalizer_matrix(roots: &[Complex64], scale: f64) -> DMatrix<Complex64> {
    let n = roots.len();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            Complex64::new(1.0, 0.0)
        } else if i > j {
            Complex64::new(0.0, 0.0)
        } else {
            let mut v = Complex64::new(scale.powi((j - i) as i32), 0.0);
            for k in i..j {
                v /= roots[k] - roots[j];
            }
            v
        }
    })
}

/// Inverse of a unitriangular matrix by back-substitution.
pub fn unitriangular_inverse(m: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    let n = m.nrows();
    let mut v = DMatrix::<Complex64>::identity(n, n);
    for j in 0..n {
        for i in (0..j).rev() {
            let mut acc = Complex64::new(0.0, 0.0);
            for k in (i + 1)..=j {
                acc += m[(i, k)] * v[(k, j)];
            }
            v[(i, j)] = -acc;
        }
    }
    v
}

/// Builds M with m_ii = 1 and, for i < j,
/// m_ij = scale^{j-i} / prod_{k=i}^{j-1} (lambda_k - lambda_j),
/// which makes M^{-1} K M diagonal. Separation is checked on `cloud`
/// (|lambda_j - lambda_k| >= c_min |xi|).
pub fn diagonalizer(roots: &[Symbol], scale: &Symbol, cloud: Option<&SampleCloud>, c_min: f64) -> Result<Diagonalizer> {
    let n = roots.len();
    if let Some(cloud) = cloud {
        for &t in &cloud.ts {
            for x in &cloud.xs {
                for xi in &cloud.xis {
                    let r = norm(xi);
                    if r == 0.0 {
                        continue;
                    }
                    let vals: Vec<f64> = roots.iter().map(|s| s.eval(t, x, xi).re).collect();
                    for j in 0..n {
                        for k in (j + 1)..n {
                            let gap = (vals[j] - vals[k]).abs() / r;
                            if gap < c_min {
                                return Err(Error::Degenerate { margin: gap, c_min, t, x: x.clone() });
                            }
                        }
                    }
                }
            }
        }
    }
    let d = scale.dim();
    let build = |inverse: bool| {
        SymbolMatrix::from_fn(n, |i, j| {
            let rs: Vec<Symbol> = roots.to_vec();
            let sc = scale.clone();
            let mut s = Symbol::new(d, 0.0, move |t, x, xi| {
                if i == j {
                    return Complex64::new(1.0, 0.0);
                }
                if i > j {
                    return Complex64::new(0.0, 0.0);
                }
                let lam: Vec<Complex64> = rs.iter().map(|r| r.eval(t, x, xi)).collect();
                let m = diagonalizer_matrix(&lam, sc.eval(t, x, xi).re);
                if inverse {
                    unitriangular_inverse(&m)[(i, j)]
                } else {
                    m[(i, j)]
                }
            });
            s.x_independent = roots.iter().all(|r| r.x_independent) && scale.x_independent;
            s.t_independent = roots.iter().all(|r| r.t_independent) && scale.t_independent;
            if i < j {
                s.zero = ZeroRule::Flagged;
            }
            s
        })
    };
    Ok(Diagonalizer { m: build(false), m_inv: build(true) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn c(v: f64) -> Complex64 {
        Complex64::new(v, 0.0)
    }

    #[test]
    fn seminorm_of_bracket_is_one() {
        let g = Grid::new(1, 2.0 * PI, 64).unwrap();
        let cloud = SampleCloud::for_grid(&g, 1.0, vec![0.0]);
        let p = Symbol::bracket(1, 1.0);
        assert_relative_eq!(seminorm(&p, 0, 1.0, &cloud).unwrap(), 1.0, epsilon = 1e-14);
        let one = Symbol::constant(1, c(1.0));
        for l in 0..3 {
            assert_relative_eq!(seminorm(&one, l, 1.0, &cloud).unwrap(), 1.0, epsilon = 1e-12);
        }
        assert!(seminorm(&one.clone().with_depth(2), 3, 1.0, &cloud).is_err());
    }

    #[test]
    fn compose_pdo_first_order_term() {
        let p = Symbol::multiplier(1, 1.0, |_, xi| c(xi[0]));
        let q = Symbol::new(1, 1.0, |_, x, xi| c(x[0].sin() * xi[0])).with_dx(1e-3);
        let r = compose_pdo(&p, &q, 2);
        for &(x, xi) in &[(0.3f64, 2.0f64), (-1.1, 5.0), (2.0, -3.0)] {
            let expect = Complex64::new(x.sin() * xi * xi, -x.cos() * xi);
            assert!((r.eval(0.0, &[x], &[xi]) - expect).norm() < 1e-9);
        }
    }

    #[test]
    fn adjoint_of_x_xi() {
        let p = Symbol::new(1, 1.0, |_, x, xi| c(x[0] * xi[0])).with_dx(1e-3);
        let a = adjoint_symbol(&p, 2);
        let v = a.eval(0.0, &[0.7], &[3.0]);
        assert!((v - Complex64::new(2.1, -1.0)).norm() < 1e-8);
        let q = Symbol::multiplier(1, -1.0, |t, xi| {
            let r = xi[0].abs();
            c(if r == 0.0 { t } else { (t * r).sin() / r })
        });
        let qa = adjoint_symbol(&q, 3);
        assert!((qa.eval(0.8, &[0.1], &[2.5]) - q.eval(0.8, &[0.1], &[2.5])).norm() < 1e-15);
    }

    #[test]
    fn diagonalizer_wave_and_inverse() {
        let l1 = Symbol::abs_xi(1);
        let l2 = l1.scale(c(-1.0));
        let dg = diagonalizer(&[l1, l2], &Symbol::bracket(1, 1.0), None, 1e-3).unwrap();
        let xi = [3.0];
        let m12 = dg.m.get(0, 1).eval(0.0, &[0.0], &xi);
        assert_relative_eq!(m12.re, 10f64.sqrt() / 6.0, epsilon = 1e-15);
        assert_eq!(dg.m.get(0, 1).eval(0.0, &[0.0], &[0.0]), c(0.0));
        let prod = dg.m.eval(0.2, &[0.0], &xi) * dg.m_inv.eval(0.2, &[0.0], &xi);
        assert!((prod - DMatrix::identity(2, 2)).norm() < 1e-14);
    }

    #[test]
    fn diagonalizer_three_roots() {
        let l = |k: f64| Symbol::multiplier(1, 1.0, move |_, xi| c(k * xi[0].abs()));
        let roots = [l(-1.0), l(0.0), l(1.0)];
        let dg = diagonalizer(&roots, &Symbol::bracket(1, 1.0), None, 1e-3).unwrap();
        for &xi in &[0.5, 2.0, 17.0] {
            let b = japanese_bracket(&[xi]);
            let lam = [-xi.abs(), 0.0, xi.abs()];
            let k = DMatrix::from_fn(3, 3, |i, j| {
                if i == j {
                    c(lam[i])
                } else if j == i + 1 {
                    c(-b)
                } else {
                    c(0.0)
                }
            });
            let m = dg.m.eval(0.0, &[0.0], &[xi]);
            let mi = dg.m_inv.eval(0.0, &[0.0], &[xi]);
            let dmat = &mi * k * &m;
            for i in 0..3 {
                for j in 0..3 {
                    let expect = if i == j { lam[i] } else { 0.0 };
                    assert!((dmat[(i, j)] - c(expect)).norm() < 1e-12 * b, "{i}{j} {}", dmat[(i, j)]);
                }
            }
        }
    }

    #[test]
    fn degenerate_roots_rejected() {
        let g = Grid::new(1, 2.0 * PI, 16).unwrap();
        let cloud = SampleCloud::for_grid(&g, 1.0, vec![0.0]);
        let z = Symbol::constant(1, c(0.0));
        let err = diagonalizer(&[z.clone(), z], &Symbol::bracket(1, 1.0), Some(&cloud), 1e-3);
        assert!(matches!(err, Err(Error::Degenerate { .. })));
    }

    #[test]
    fn multi_index_counts() {
        assert_eq!(multi_indices(2, 2).len(), 6);
        assert_eq!(multi_indices(1, 3).len(), 4);
        assert_eq!(multi_indices(3, 1).len(), 4);
    }
}
