//! Hyperbolic operators in D-form, their characteristic roots, and the
//! reduction to a first-order system D_t + K + R with its diagonalizer.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::grid::{japanese_bracket, norm, Grid};
use crate::symbol::{diagonalizer, directions, unitriangular_inverse, Diagonalizer, SampleCloud, Symbol, SymbolMatrix, ZeroRule};

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };
const ROOT_TOL: f64 = 1e-10;
pub const DEFAULT_C_MIN: f64 = 1e-3;

pub type CoefFn = dyn Fn(f64, &[f64]) -> f64 + Send + Sync;

/// Real coefficient a(t, x) with dependence flags.
#[derive(Clone)]
pub struct Coefficient {
    f: Arc<CoefFn>,
    x_independent: bool,
    t_independent: bool,
    label: String,
}

impl fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Coefficient({})", self.label)
    }
}

impl Coefficient {
    pub fn constant(v: f64) -> Coefficient {
        Coefficient { f: Arc::new(move |_, _| v), x_independent: true, t_independent: true, label: format!("{v}") }
    }

    pub fn new(label: &str, f: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Coefficient {
        Coefficient { f: Arc::new(f), x_independent: false, t_independent: false, label: label.to_string() }
    }

    /// Expression over t, x1, x2, x3 (see [`crate::expr`]).
    pub fn from_expr(src: &str) -> Result<Coefficient> {
        let e = Expr::parse(src, &["t", "x1", "x2", "x3"])?;
        let x_independent = (1..4).all(|i| e.independent_of(i));
        let t_independent = e.independent_of(0);
        let label = src.to_string();
        Ok(Coefficient {
            f: Arc::new(move |t, x| {
                let mut v = [t, 0.0, 0.0, 0.0];
                for (k, xi) in x.iter().take(3).enumerate() {
                    v[k + 1] = *xi;
                }
                e.eval(&v)
            }),
            x_independent,
            t_independent,
            label,
        })
    }

    pub fn time_independent(mut self) -> Coefficient {
        self.t_independent = true;
        self
    }

    pub fn space_independent(mut self) -> Coefficient {
        self.x_independent = true;
        self
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        (self.f)(t, x)
    }

    pub fn is_x_independent(&self) -> bool {
        self.x_independent
    }

    pub fn is_t_independent(&self) -> bool {
        self.t_independent
    }

    pub fn is_constant(&self) -> bool {
        self.x_independent && self.t_independent
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn dt(&self, t: f64, x: &[f64]) -> f64 {
        if self.t_independent {
            return 0.0;
        }
        let h = 1e-4;
        let f = |u: f64| self.eval(u, x);
        (f(t - 2.0 * h) - 8.0 * f(t - h) + 8.0 * f(t + h) - f(t + 2.0 * h)) / (12.0 * h)
    }

    pub fn dx(&self, t: f64, x: &[f64], axis: usize) -> f64 {
        if self.x_independent {
            return 0.0;
        }
        let h = 1e-4;
        let at = |d: f64| {
            let mut y = x.to_vec();
            y[axis] += d;
            self.eval(t, &y)
        };
        (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h)
    }
}

/// One term a_{alpha, j}(t, x) D_x^alpha D_t^j of the general operator,
/// scaled by a complex factor.
#[derive(Clone, Debug)]
pub struct Term {
    pub alpha: Vec<usize>,
    pub j: usize,
    pub coef: Coefficient,
    pub factor: Complex64,
}

#[derive(Clone, Debug)]
enum Form {
    /// d_t^2 - sum a_jk d_j d_k - sum b_j d_j - c, i.e. minus
    /// D_t^2 - sum a_jk D_j D_k + i sum b_j D_j + c.
    Second { a: Vec<Coefficient>, b: Vec<Coefficient>, c: Coefficient },
    General { terms: Vec<Term> },
}

/// Order-n hyperbolic operator P = D_t^n + sum a_{alpha, j} D_x^alpha D_t^j.
#[derive(Clone, Debug)]
pub struct HyperbolicOperator {
    n: usize,
    dim: usize,
    form: Form,
    /// P u = source_sign * f for the user's right-hand side f.
    source_sign: f64,
}

impl HyperbolicOperator {
    /// Second-order operator in the form d_t^2 u - sum a_jk d_j d_k u - sum b_j d_j u - c u = f.
    /// `a` is row-major d x d and must be symmetric.
    pub fn second_order(dim: usize, a: Vec<Coefficient>, b: Vec<Coefficient>, c: Coefficient) -> Result<HyperbolicOperator> {
        if !(1..=3).contains(&dim) || a.len() != dim * dim || b.len() != dim {
            return Err(Error::Contract(format!("need {} a-entries and {dim} b-entries for d={dim}", dim * dim)));
        }
        let probes: [(f64, [f64; 3]); 3] = [(0.0, [0.1, -0.7, 0.3]), (0.37, [1.3, 0.2, -2.1]), (0.9, [-0.4, 2.5, 0.9])];
        for j in 0..dim {
            for k in (j + 1)..dim {
                for (t, x) in &probes {
                    let (u, v) = (a[j * dim + k].eval(*t, &x[..dim]), a[k * dim + j].eval(*t, &x[..dim]));
                    if (u - v).abs() > 1e-12 * (1.0 + u.abs()) {
                        return Err(Error::Contract(format!("a_{j}{k} and a_{k}{j} differ")));
                    }
                }
            }
        }
        Ok(HyperbolicOperator { n: 2, dim, form: Form::Second { a, b, c }, source_sign: -1.0 })
    }

    /// Wave operator d_t^2 - speed^2 Laplacian.
    pub fn wave(dim: usize, speed: f64) -> HyperbolicOperator {
        let a = (0..dim * dim).map(|k| Coefficient::constant(if k / dim == k % dim { speed * speed } else { 0.0 })).collect();
        let b = (0..dim).map(|_| Coefficient::constant(0.0)).collect();
        HyperbolicOperator::second_order(dim, a, b, Coefficient::constant(0.0)).expect("valid wave operator")
    }

    /// d = 1 operator d_t^2 - a(t, x) d_x^2.
    pub fn scalar_1d(a: Coefficient) -> HyperbolicOperator {
        HyperbolicOperator::second_order(1, vec![a], vec![Coefficient::constant(0.0)], Coefficient::constant(0.0)).expect("d = 1")
    }

    /// General order-n operator in D-form, problem P u = f.
    pub fn general(n: usize, dim: usize, terms: Vec<Term>) -> Result<HyperbolicOperator> {
        if n < 2 {
            return Err(Error::Contract("order must be at least 2".into()));
        }
        for t in &terms {
            let a: usize = t.alpha.iter().sum();
            if t.alpha.len() != dim || t.j >= n || a + t.j > n {
                return Err(Error::Contract(format!("term D^{:?} D_t^{} does not fit order {n}", t.alpha, t.j)));
            }
        }
        Ok(HyperbolicOperator { n, dim, form: Form::General { terms }, source_sign: 1.0 })
    }

    /// Constant-coefficient operator with principal symbol prod_j (tau - c_j |xi|) in d = 1,
    /// plus a zero-order term c0.
    pub fn factored_1d(speeds: &[f64], c0: f64) -> Result<HyperbolicOperator> {
        let n = speeds.len();
        // coefficients of prod (tau - c_j s), s = xi, as polynomial in tau
        let mut poly = vec![1.0];
        for &c in speeds {
            let mut next = vec![0.0; poly.len() + 1];
            for (k, p) in poly.iter().enumerate() {
                next[k + 1] += p;
                next[k] -= c * p;
            }
            poly = next;
        }
        let mut terms: Vec<Term> = (0..n)
            .filter(|&j| poly[j] != 0.0)
            .map(|j| Term { alpha: vec![n - j], j, coef: Coefficient::constant(poly[j]), factor: Complex64::new(1.0, 0.0) })
            .collect();
        if c0 != 0.0 {
            terms.push(Term { alpha: vec![0], j: 0, coef: Coefficient::constant(c0), factor: Complex64::new(1.0, 0.0) });
        }
        HyperbolicOperator::general(n, 1, terms)
    }

    pub fn order(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn source_sign(&self) -> f64 {
        self.source_sign
    }

    fn coefficients(&self) -> Vec<&Coefficient> {
        match &self.form {
            Form::Second { a, b, c } => a.iter().chain(b.iter()).chain(std::iter::once(c)).collect(),
            Form::General { terms } => terms.iter().map(|t| &t.coef).collect(),
        }
    }

    pub fn is_x_independent(&self) -> bool {
        self.coefficients().iter().all(|c| c.is_x_independent())
    }

    pub fn is_t_independent(&self) -> bool {
        self.coefficients().iter().all(|c| c.is_t_independent())
    }

    /// sum a_jk(t, x) xi_j xi_k for the second-order form.
    pub fn quadratic_form(&self, t: f64, x: &[f64], xi: &[f64]) -> f64 {
        match &self.form {
            Form::Second { a, .. } => {
                let d = self.dim;
                let mut q = 0.0;
                for j in 0..d {
                    for k in 0..d {
                        q += a[j * d + k].eval(t, x) * xi[j] * xi[k];
                    }
                }
                q
            }
            Form::General { .. } => -self.principal_coeffs(t, x, xi)[0],
        }
    }

    /// Coefficients c_0..c_{n-1} of the full symbol P(tau) = tau^n + sum c_j tau^j.
    pub fn full_coeffs(&self, t: f64, x: &[f64], xi: &[f64]) -> Vec<Complex64> {
        self.coeffs(t, x, xi, false)
    }

    /// Real coefficients of the principal symbol p_n.
    pub fn principal_coeffs(&self, t: f64, x: &[f64], xi: &[f64]) -> Vec<f64> {
        self.coeffs(t, x, xi, true).into_iter().map(|c| c.re).collect()
    }

    fn coeffs(&self, t: f64, x: &[f64], xi: &[f64], principal: bool) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); self.n];
        match &self.form {
            Form::Second { a, b, c } => {
                let _ = a;
                out[0] = Complex64::new(-self.quadratic_form(t, x, xi), 0.0);
                if !principal {
                    let bx: f64 = b.iter().zip(xi).map(|(bj, v)| bj.eval(t, x) * v).sum();
                    out[0] += I * bx + c.eval(t, x);
                }
            }
            Form::General { terms } => {
                for term in terms {
                    let a: usize = term.alpha.iter().sum();
                    if principal && a + term.j != self.n {
                        continue;
                    }
                    let mono: f64 = term.alpha.iter().zip(xi).map(|(&p, v)| v.powi(p as i32)).product();
                    out[term.j] += term.factor * term.coef.eval(t, x) * mono;
                }
            }
        }
        out
    }

    /// The n real tau-roots of p_n(t, x, ., xi), ascending.
    pub fn characteristic_roots(&self, t: f64, x: &[f64], xi: &[f64]) -> Result<Vec<f64>> {
        let r = norm(xi);
        if r == 0.0 {
            return Err(Error::Contract("characteristic roots need xi != 0".into()));
        }
        let unit: Vec<f64> = xi.iter().map(|v| v / r).collect();
        let not_hyp = || Error::NotHyperbolic { t, x: x.to_vec(), xi: xi.to_vec() };
        if let Form::Second { .. } = self.form {
            let q = self.quadratic_form(t, x, &unit);
            if q < -ROOT_TOL {
                return Err(not_hyp());
            }
            let s = q.max(0.0).sqrt() * r;
            return Ok(vec![-s, s]);
        }
        let c = self.principal_coeffs(t, x, &unit);
        let n = self.n;
        let comp = DMatrix::from_fn(n, n, |i, j| if i + 1 == j { 1.0 } else if i == n - 1 { -c[j] } else { 0.0 });
        let eig = comp.complex_eigenvalues();
        let mut roots = Vec::with_capacity(n);
        for z in eig.iter() {
            if z.im.abs() > ROOT_TOL {
                return Err(not_hyp());
            }
            roots.push(z.re * r);
        }
        roots.sort_by(|a, b| a.total_cmp(b));
        Ok(roots)
    }

    /// lambda_j(t, x, xi) = -tau_j, the roots in the factorization prod (tau + lambda_j).
    pub fn lambda(&self, t: f64, x: &[f64], xi: &[f64]) -> Result<Vec<f64>> {
        if norm(xi) == 0.0 {
            return Ok(vec![0.0; self.n]);
        }
        Ok(self.characteristic_roots(t, x, xi)?.into_iter().map(|v| -v).collect())
    }

    /// Root symbols lambda_1..lambda_n with first derivatives supplied in
    /// closed form for the second-order form.
    pub fn root_symbols(&self, dx: f64) -> Vec<Symbol> {
        let d = self.dim;
        let mut out = Vec::with_capacity(self.n);
        for j in 0..self.n {
            let op = self.clone();
            let mut s = Symbol::new(d, 1.0, move |t, x, xi| {
                let v = op.lambda(t, x, xi).map(|l| l[j]).unwrap_or(f64::NAN);
                Complex64::new(v, 0.0)
            })
            .with_dx(dx);
            if let Form::Second { a, .. } = &self.form {
                let sign = if j == 0 { 1.0 } else { -1.0 };
                let (op, a) = (self.clone(), a.clone());
                s = s.with_derivative(move |t, x, xi, alpha, beta| {
                    let ka: usize = alpha.iter().sum();
                    let kb: usize = beta.iter().sum();
                    if ka + kb != 1 {
                        return None;
                    }
                    let q = op.quadratic_form(t, x, xi);
                    if q <= 0.0 {
                        return None;
                    }
                    let l = q.sqrt();
                    let v = if ka == 1 {
                        let m = alpha.iter().position(|&v| v == 1).expect("unit index");
                        (0..d).map(|k| a[m * d + k].eval(t, x) * xi[k]).sum::<f64>() / l
                    } else {
                        let m = beta.iter().position(|&v| v == 1).expect("unit index");
                        let mut dq = 0.0;
                        for p in 0..d {
                            for k in 0..d {
                                dq += a[p * d + k].dx(t, x, m) * xi[p] * xi[k];
                            }
                        }
                        dq / (2.0 * l)
                    };
                    Some(Complex64::new(sign * v, 0.0))
                });
            }
            if self.is_x_independent() {
                s = s.space_independent();
            }
            if self.is_t_independent() {
                s = s.time_independent();
            }
            out.push(s);
        }
        out
    }

    /// Minimum over the sample of sum a_jk xi_j xi_k on the unit sphere (n = 2)
    /// or of min_{j != k} |lambda_j - lambda_k| / |xi| (general n).
    pub fn strictness_margin(&self, grid: &Grid, ts: &[f64]) -> f64 {
        let d = self.dim;
        let dirs = directions(d, 16);
        let xs: Vec<Vec<f64>> = if self.is_x_independent() {
            vec![vec![0.0; d]]
        } else {
            let stride = (grid.total() / 512).max(1);
            (0..grid.total()).step_by(stride).map(|i| grid.point(i)).collect()
        };
        let mut worst = f64::INFINITY;
        for &t in ts {
            for x in &xs {
                for u in &dirs {
                    let m = match self.form {
                        Form::Second { .. } => self.quadratic_form(t, x, u),
                        Form::General { .. } => match self.characteristic_roots(t, x, u) {
                            Ok(r) => r.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min),
                            Err(_) => 0.0,
                        },
                    };
                    worst = worst.min(m);
                }
            }
        }
        worst
    }

    /// D_x-symbol of the spatial part of P (all terms with j = 0) for the
    /// second-order form: -sum a xi xi + i b.xi + c.
    pub fn spatial_symbol(&self, dx: f64) -> Symbol {
        let op = self.clone();
        let mut s = Symbol::new(self.dim, self.n as f64, move |t, x, xi| op.full_coeffs(t, x, xi)[0]).with_dx(dx);
        if self.is_x_independent() {
            s = s.space_independent();
        }
        if self.is_t_independent() {
            s = s.time_independent();
        }
        s
    }

    /// Reduction to D_t + K + R with v_1 = <D>^{n-1} u and
    /// v_j = <D>^{n-j} (D_t + lambda_{j-1}) ... (D_t + lambda_1) u.
    pub fn reduce(&self, grid: &Arc<Grid>, ts: &[f64], c_min: f64) -> Result<FirstOrderSystem> {
        let margin = self.strictness_margin(grid, ts);
        if margin <= c_min {
            let t0 = ts.first().copied().unwrap_or(0.0);
            return Err(Error::Degenerate { margin, c_min, t: t0, x: vec![] });
        }
        let d = self.dim;
        let dx = grid.h() / 4.0;
        let roots = self.root_symbols(dx);
        let bracket = Symbol::bracket(d, 1.0);
        let n = self.n;
        let zero = Symbol::constant(d, Complex64::new(0.0, 0.0));
        let k = SymbolMatrix::from_fn(n, |i, j| {
            if i == j {
                roots[i].clone()
            } else if j == i + 1 {
                bracket.scale(Complex64::new(-1.0, 0.0))
            } else {
                zero.clone()
            }
        });
        let r = match self.form {
            Form::Second { .. } => self.remainder_second(&roots, &bracket, dx),
            Form::General { .. } => {
                if !(self.is_x_independent() && self.is_t_independent()) {
                    return Err(Error::Unsupported(format!(
                        "order-{n} reduction needs constant coefficients; variable coefficients are supported for n = 2 only"
                    )));
                }
                self.remainder_constant()
            }
        };
        Ok(FirstOrderSystem { op: self.clone(), grid: grid.clone(), roots, bracket, k, r, diag: None })
    }

    fn remainder_second(&self, roots: &[Symbol], bracket: &Symbol, dx: f64) -> SymbolMatrix {
        let d = self.dim;
        let zero = Symbol::constant(d, Complex64::new(0.0, 0.0));
        let inv = bracket.map(-1.0, |v| 1.0 / v);
        let l1 = roots[0].clone();
        // [<D>, Lambda_1] <D>^{-1}
        let comm = crate::symbol::compose_pdo(bracket, &l1, 2).sub(&crate::symbol::compose_pdo(&l1, bracket, 2));
        let r11 = if self.is_x_independent() { zero.clone() } else { crate::symbol::compose_pdo(&comm, &inv, 2).with_order(0.0) };
        // S_0 = P_sp - Lambda_2 Lambda_1 + i Op(d_t lambda_1)
        let l2l1 = crate::symbol::compose_pdo(&roots[1], &l1, 2);
        let l1c = l1.clone();
        let mut dt_l1 = Symbol::new(d, 1.0, move |t, x, xi| I * l1c.dt(t, x, xi)).with_dx(dx);
        if self.is_x_independent() {
            dt_l1 = dt_l1.space_independent();
        }
        if self.is_t_independent() {
            dt_l1 = dt_l1.time_independent();
        }
        let s0 = self.spatial_symbol(dx).sub(&l2l1).add(&dt_l1).with_order(1.0);
        let r21 = crate::symbol::compose_pdo(&s0, &inv, 2).with_order(0.0);
        SymbolMatrix::new(2, vec![r11, zero.clone(), r21, zero]).expect("2 x 2")
    }

    fn remainder_constant(&self) -> SymbolMatrix {
        let n = self.n;
        let d = self.dim;
        let zero = Symbol::constant(d, Complex64::new(0.0, 0.0));
        SymbolMatrix::from_fn(n, |i, l| {
            if i + 1 != n {
                return zero.clone();
            }
            let op = self.clone();
            Symbol::multiplier(d, 0.0, move |_, xi| {
                let lam = op.lambda(0.0, &[], xi).unwrap_or_else(|_| vec![f64::NAN; n]);
                let (s, c) = factor_remainder(&op.full_coeffs(0.0, &vec![0.0; xi.len()], xi), &lam);
                let b = japanese_bracket(xi);
                (0..n).map(|j| s[j] * c[j][l]).sum::<Complex64>() * b.powi(l as i32 + 1 - n as i32)
            })
            .time_independent()
        })
    }
}

/// For P(tau) = tau^n + sum p_j tau^j and Q_l = prod_{k < l} (tau + lambda_k):
/// returns S_j, the coefficients of P - Q_n, and the Newton coefficients
/// c[j][l] with tau^j = sum_l c[j][l] Q_l.
pub fn factor_remainder(p: &[Complex64], lam: &[f64]) -> (Vec<Complex64>, Vec<Vec<Complex64>>) {
    let n = p.len();
    let q = newton_polys(lam);
    let s: Vec<Complex64> = (0..n).map(|j| p[j] - q[n][j]).collect();
    let mut c = vec![vec![Complex64::new(0.0, 0.0); n]; n];
    c[0][0] = Complex64::new(1.0, 0.0);
    for j in 0..n.saturating_sub(1) {
        // tau Q_l = Q_{l+1} - lambda_l Q_l
        let prev = c[j].clone();
        for l in 0..n {
            if prev[l] == Complex64::new(0.0, 0.0) {
                continue;
            }
            if l + 1 < n {
                c[j + 1][l + 1] += prev[l];
            }
            c[j + 1][l] -= prev[l] * lam[l];
        }
    }
    (s, c)
}

/// Coefficient vectors (ascending powers of tau) of Q_0..Q_n.
pub fn newton_polys(lam: &[f64]) -> Vec<Vec<Complex64>> {
    let n = lam.len();
    let mut out = vec![vec![Complex64::new(0.0, 0.0); n + 1]; n + 1];
    out[0][0] = Complex64::new(1.0, 0.0);
    for l in 0..n {
        let (head, tail) = out.split_at_mut(l + 1);
        let prev = &head[l];
        let next = &mut tail[0];
        for k in 0..=n {
            if prev[k] == Complex64::new(0.0, 0.0) {
                continue;
            }
            if k < n {
                next[k + 1] += prev[k];
            }
            next[k] += prev[k] * lam[l];
        }
    }
    out
}

/// Diagonalized part of a first-order system.
#[derive(Clone, Debug)]
pub struct Diagonalized {
    pub m: Diagonalizer,
    pub k1: SymbolMatrix,
    pub r_tilde: SymbolMatrix,
}

/// The system D_t + K + R for V = (v_1, ..., v_n).
#[derive(Clone, Debug)]
pub struct FirstOrderSystem {
    pub op: HyperbolicOperator,
    pub grid: Arc<Grid>,
    pub roots: Vec<Symbol>,
    pub bracket: Symbol,
    pub k: SymbolMatrix,
    pub r: SymbolMatrix,
    pub diag: Option<Diagonalized>,
}

impl FirstOrderSystem {
    pub fn n(&self) -> usize {
        self.op.order()
    }

    pub fn dim(&self) -> usize {
        self.op.dim()
    }

    pub fn is_x_independent(&self) -> bool {
        self.op.is_x_independent()
    }

    /// Conjugates by the diagonalizer M. Separation is checked on `cloud`.
    pub fn diagonalize(&self, cloud: Option<&SampleCloud>, c_min: f64) -> Result<FirstOrderSystem> {
        let m = diagonalizer(&self.roots, &self.bracket, cloud, c_min)?;
        let n = self.n();
        let d = self.dim();
        let zero = Symbol::constant(d, Complex64::new(0.0, 0.0));
        let k1 = SymbolMatrix::from_fn(n, |i, j| if i == j { self.roots[i].clone() } else { zero.clone() });
        let sys = self.clone();
        let r_tilde = SymbolMatrix::from_fn(n, |i, j| {
            let s = sys.clone();
            let mut e = Symbol::new(d, 0.0, move |t, x, xi| s.conjugated_remainder(t, x, xi)[(i, j)]);
            if sys.is_x_independent() {
                e = e.space_independent();
            }
            if sys.op.is_t_independent() {
                e = e.time_independent();
            }
            e
        });
        let mut out = self.clone();
        out.diag = Some(Diagonalized { m, k1, r_tilde });
        Ok(out)
    }

    /// M(t, x, xi) and M^{-1}; the identity at xi = 0 where the off-diagonal
    /// entries are flagged.
    pub fn diagonalizer_at(&self, t: f64, x: &[f64], xi: &[f64]) -> (DMatrix<Complex64>, DMatrix<Complex64>) {
        let n = self.n();
        if norm(xi) == 0.0 {
            return (DMatrix::identity(n, n), DMatrix::identity(n, n));
        }
        let m = match &self.diag {
            Some(dg) => dg.m.m.eval(t, x, xi),
            None => {
                let lam: Vec<Symbol> = self.roots.clone();
                let dgz = diagonalizer(&lam, &self.bracket, None, 0.0).expect("no cloud check");
                dgz.m.eval(t, x, xi)
            }
        };
        let minv = unitriangular_inverse(&m);
        (m, minv)
    }

    /// Pointwise symbol of K + R.
    pub fn system_symbol(&self, t: f64, x: &[f64], xi: &[f64]) -> DMatrix<Complex64> {
        self.k.eval(t, x, xi) + self.r.eval(t, x, xi)
    }

    /// Pointwise M^{-1}(K + R)M + M^{-1} D_t M. Exact for x-independent
    /// coefficients, the leading product term otherwise.
    pub fn conjugated_symbol(&self, t: f64, x: &[f64], xi: &[f64]) -> DMatrix<Complex64> {
        let (m, minv) = self.diagonalizer_at(t, x, xi);
        let mut out = &minv * self.system_symbol(t, x, xi) * &m;
        if !self.op.is_t_independent() && norm(xi) > 0.0 {
            let h = 1e-4;
            let mt = |u: f64| self.diagonalizer_at(u, x, xi).0;
            let dm = (mt(t - 2.0 * h) - mt(t - h) * Complex64::new(8.0, 0.0) + mt(t + h) * Complex64::new(8.0, 0.0) - mt(t + 2.0 * h))
                / Complex64::new(12.0 * h, 0.0);
            out += &minv * dm * (-I);
        }
        out
    }

    /// R-tilde = conjugated symbol minus the diagonal of roots.
    pub fn conjugated_remainder(&self, t: f64, x: &[f64], xi: &[f64]) -> DMatrix<Complex64> {
        let mut a = self.conjugated_symbol(t, x, xi);
        if norm(xi) == 0.0 {
            // K(0) is nilpotent; it is carried by the zero-mode transport
            let n = self.n();
            for i in 0..n.saturating_sub(1) {
                a[(i, i + 1)] += Complex64::new(1.0, 0.0);
            }
            return a;
        }
        for (i, r) in self.roots.iter().enumerate() {
            a[(i, i)] -= r.eval(t, x, xi);
        }
        a
    }

    /// B with v_j(0) = sum_l B_jl D_t^l u(0) at (t, x, xi).
    pub fn initial_transform(&self, t: f64, x: &[f64], xi: &[f64]) -> DMatrix<Complex64> {
        let n = self.n();
        let lam: Vec<f64> = self.roots.iter().map(|r| r.eval(t, x, xi).re).collect();
        let q = newton_polys(&lam);
        let b = japanese_bracket(xi);
        DMatrix::from_fn(n, n, |j, l| if l <= j { q[j][l] * b.powi((n - 1 - j) as i32) } else { Complex64::new(0.0, 0.0) })
    }
}

/// Largest |M^{-1} K M - diag(lambda)| / |xi| over the cloud.
pub fn diagonalization_defect(sys: &FirstOrderSystem, cloud: &SampleCloud) -> f64 {
    let mut worst: f64 = 0.0;
    for &t in &cloud.ts {
        for x in cloud.xs.iter().take(if sys.is_x_independent() { 1 } else { usize::MAX }) {
            for xi in &cloud.xis {
                let r = norm(xi);
                if r == 0.0 {
                    continue;
                }
                let (m, minv) = sys.diagonalizer_at(t, x, xi);
                let mut a = &minv * sys.k.eval(t, x, xi) * &m;
                for (i, s) in sys.roots.iter().enumerate() {
                    a[(i, i)] -= s.eval(t, x, xi);
                }
                worst = worst.max(a.iter().map(|v| v.norm()).fold(0.0, f64::max) / r);
            }
        }
    }
    worst
}

/// Whether every strictly upper entry of M carries the xi = 0 flag.
pub fn off_diagonal_flagged(d: &Diagonalizer) -> bool {
    let n = d.m.n();
    (0..n).all(|i| ((i + 1)..n).all(|j| d.m.get(i, j).zero_rule() == ZeroRule::Flagged))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn wave_roots_and_margin() {
        let op = HyperbolicOperator::wave(2, 1.0);
        assert_eq!(op.characteristic_roots(0.0, &[0.0, 0.0], &[3.0, 4.0]).unwrap(), vec![-5.0, 5.0]);
        let g = Grid::new(2, 2.0 * PI, 8).unwrap();
        assert!((op.strictness_margin(&g, &[0.0, 1.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn variable_root() {
        let a = Coefficient::from_expr("2 + sin(x)").unwrap();
        let op = HyperbolicOperator::scalar_1d(a);
        let r = op.characteristic_roots(0.0, &[PI / 2.0], &[1.0]).unwrap();
        assert!((r[1] - 3f64.sqrt()).abs() < 1e-14 && (r[0] + 3f64.sqrt()).abs() < 1e-14);
        let g = Grid::new(1, 2.0 * PI, 64).unwrap();
        assert!((op.strictness_margin(&g, &[0.0]) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn third_order_companion_roots() {
        let op = HyperbolicOperator::factored_1d(&[1.0, 0.0, -1.0], 0.0).unwrap();
        let r = op.characteristic_roots(0.0, &[0.0], &[2.5]).unwrap();
        for (a, b) in r.iter().zip([-2.5, 0.0, 2.5]) {
            assert!((a - b).abs() < 1e-12);
        }
        let c = op.principal_coeffs(0.0, &[0.0], &[2.5]);
        for tau in r {
            let v = tau.powi(3) + c[2] * tau * tau + c[1] * tau + c[0];
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_coefficient_rejected() {
        let op = HyperbolicOperator::scalar_1d(Coefficient::from_expr("t^3").unwrap().space_independent());
        let g = Grid::new(1, 2.0 * PI, 16).unwrap();
        assert_eq!(op.strictness_margin(&g, &[0.0, 0.5]), 0.0);
        assert!(matches!(op.reduce(&g, &[0.0, 0.5], DEFAULT_C_MIN), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn wave_reduction_is_exact() {
        let g = Grid::new(1, 2.0 * PI, 16).unwrap();
        let sys = HyperbolicOperator::wave(1, 1.0).reduce(&g, &[0.0, 1.0], DEFAULT_C_MIN).unwrap();
        let k = sys.k.eval(0.3, &[0.0], &[2.0]);
        assert_eq!(k[(0, 0)].re, 2.0);
        assert_eq!(k[(1, 1)].re, -2.0);
        assert!((k[(0, 1)].re + 5f64.sqrt()).abs() < 1e-15);
        assert_eq!(sys.r.eval(0.3, &[0.0], &[2.0]).iter().map(|v| v.norm()).sum::<f64>(), 0.0);
        let d = sys.diagonalize(None, DEFAULT_C_MIN).unwrap();
        let rt = d.conjugated_remainder(0.3, &[0.0], &[2.0]);
        assert!(rt.iter().all(|v| v.norm() < 1e-14));
        assert!(off_diagonal_flagged(&d.diag.as_ref().unwrap().m));
    }

    #[test]
    fn newton_expansion_reproduces_monomials() {
        let lam = [0.7, -1.3, 2.0];
        let q = newton_polys(&lam);
        let p = vec![Complex64::new(0.0, 0.0); 3];
        let (_, c) = factor_remainder(&p, &lam);
        for (j, row) in c.iter().enumerate() {
            for tau in [0.3f64, -1.1, 2.4] {
                let lhs: f64 = tau.powi(j as i32);
                let rhs: Complex64 = (0..3).map(|l| row[l] * (0..=3).map(|k| q[l][k] * tau.powi(k as i32)).sum::<Complex64>()).sum();
                assert!((rhs.re - lhs).abs() < 1e-12 && rhs.im.abs() < 1e-12);
            }
        }
    }
}
