//! Quadrature helpers: Gauss-Legendre panels, adaptive Gauss-Kronrod, and
//! Lagrange integration matrices for Volterra collocation.

use gauss_quad::GaussLegendre;

use crate::error::{Error, Result};

/// Gauss-Legendre nodes and weights on [-1, 1], ascending.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    if n == 1 {
        return vec![(0.0, 2.0)];
    }
    let rule = GaussLegendre::new(n).expect("degree >= 2");
    let mut pairs: Vec<(f64, f64)> = rule.as_node_weight_pairs().to_vec();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs
}

/// Composite Gauss-Legendre rule on [a, b] with `panels` equal panels.
#[derive(Debug, Clone)]
pub struct CompositeRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub panels: usize,
    pub per_panel: usize,
    pub a: f64,
    pub b: f64,
}

impl CompositeRule {
    pub fn new(a: f64, b: f64, panels: usize, per_panel: usize) -> CompositeRule {
        let base = gauss_legendre(per_panel);
        let width = (b - a) / panels as f64;
        let mut nodes = Vec::with_capacity(panels * per_panel);
        let mut weights = Vec::with_capacity(panels * per_panel);
        for p in 0..panels {
            let lo = a + p as f64 * width;
            for &(x, w) in &base {
                nodes.push(lo + 0.5 * width * (x + 1.0));
                weights.push(0.5 * width * w);
            }
        }
        CompositeRule { nodes, weights, panels, per_panel, a, b }
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }

    pub fn panel_bounds(&self, p: usize) -> (f64, f64) {
        let width = (self.b - self.a) / self.panels as f64;
        (self.a + p as f64 * width, self.a + (p + 1) as f64 * width)
    }

    /// Matrix S with S[i][k] = integral from a to nodes[i] of the k-th
    /// piecewise Lagrange basis function, so that sum_k S[i][k] g(nodes[k])
    /// approximates the integral of g over [a, nodes[i]].
    pub fn cumulative_matrix(&self) -> Vec<Vec<f64>> {
        let q = self.per_panel;
        let m = self.nodes.len();
        let mut s = vec![vec![0.0; m]; m];
        for p in 0..self.panels {
            let (lo, _) = self.panel_bounds(p);
            let local: Vec<f64> = self.nodes[p * q..(p + 1) * q].to_vec();
            let partial = lagrange_integrals(&local, lo);
            for i in 0..q {
                let row = p * q + i;
                for earlier in 0..p {
                    for k in 0..q {
                        s[row][earlier * q + k] = self.weights[earlier * q + k];
                    }
                }
                for k in 0..q {
                    s[row][p * q + k] = partial[i][k];
                }
            }
        }
        s
    }

    /// Weights for the integral over [a, t] with t inside [a, b].
    pub fn weights_up_to(&self, t: f64) -> Vec<f64> {
        let q = self.per_panel;
        let mut w = vec![0.0; self.nodes.len()];
        for p in 0..self.panels {
            let (lo, hi) = self.panel_bounds(p);
            if t >= hi - 1e-15 * (1.0 + hi.abs()) {
                w[p * q..(p + 1) * q].copy_from_slice(&self.weights[p * q..(p + 1) * q]);
            } else if t > lo {
                let local: Vec<f64> = self.nodes[p * q..(p + 1) * q].to_vec();
                let row = lagrange_integral_row(&local, lo, t);
                w[p * q..(p + 1) * q].copy_from_slice(&row);
                break;
            } else {
                break;
            }
        }
        w
    }
}

fn lagrange_basis(nodes: &[f64], k: usize, x: f64) -> f64 {
    nodes
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != k)
        .map(|(_, &xj)| (x - xj) / (nodes[k] - xj))
        .product()
}

fn lagrange_integral_row(nodes: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let rule = gauss_legendre(nodes.len().max(2));
    (0..nodes.len())
        .map(|k| {
            rule.iter()
                .map(|&(x, w)| {
                    let tau = lo + 0.5 * (hi - lo) * (x + 1.0);
                    0.5 * (hi - lo) * w * lagrange_basis(nodes, k, tau)
                })
                .sum()
        })
        .collect()
}

fn lagrange_integrals(nodes: &[f64], lo: f64) -> Vec<Vec<f64>> {
    nodes.iter().map(|&hi| lagrange_integral_row(nodes, lo, hi)).collect()
}

const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

fn gk15(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let hw = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let dx = hw * XGK[j];
        let s = f(c - dx) + f(c + dx);
        kron += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    (kron * hw, ((kron - gauss) * hw).abs())
}

/// Adaptive Gauss-Kronrod (7-15) integration over [a, b].
/// Returns the value and the estimated absolute error.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, rel_tol: f64, abs_tol: f64) -> Result<(f64, f64)> {
    integrate_breaks(f, &[a, b], rel_tol, abs_tol)
}

/// Adaptive integration with user breakpoints (sorted ascending).
pub fn integrate_breaks(f: impl Fn(f64) -> f64, breaks: &[f64], rel_tol: f64, abs_tol: f64) -> Result<(f64, f64)> {
    integrate_capped(f, breaks, rel_tol, abs_tol, 4000)
}

/// `integrate` with a cap on the number of subintervals.
pub fn integrate_limited(f: impl Fn(f64) -> f64, a: f64, b: f64, rel_tol: f64, abs_tol: f64, max_intervals: usize) -> Result<(f64, f64)> {
    integrate_capped(f, &[a, b], rel_tol, abs_tol, max_intervals)
}

fn integrate_capped(f: impl Fn(f64) -> f64, breaks: &[f64], rel_tol: f64, abs_tol: f64, max_intervals: usize) -> Result<(f64, f64)> {
    let mut intervals: Vec<(f64, f64, f64, f64)> = breaks
        .windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| {
            let (v, e) = gk15(&f, w[0], w[1]);
            (w[0], w[1], v, e)
        })
        .collect();
    loop {
        let total: f64 = intervals.iter().map(|i| i.2).sum();
        let err: f64 = intervals.iter().map(|i| i.3).sum();
        if !total.is_finite() {
            return Err(Error::Contract("integrand produced a non-finite value".into()));
        }
        if err <= abs_tol.max(rel_tol * total.abs()) {
            return Ok((total, err));
        }
        if intervals.len() >= max_intervals {
            return Err(Error::Contract(format!(
                "adaptive quadrature did not converge: estimate {total:.6e}, error {err:.3e}"
            )));
        }
        let (worst, _) = intervals
            .iter()
            .enumerate()
            .max_by(|a, b| a.1 .3.total_cmp(&b.1 .3))
            .expect("non-empty");
        let (lo, hi, _, _) = intervals.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return Err(Error::Contract("adaptive quadrature hit floating-point resolution".into()));
        }
        let (v1, e1) = gk15(&f, lo, mid);
        let (v2, e2) = gk15(&f, mid, hi);
        intervals.push((lo, mid, v1, e1));
        intervals.push((mid, hi, v2, e2));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn composite_rule_integrates_polynomials() {
        let r = CompositeRule::new(0.0, 2.0, 3, 4);
        assert_relative_eq!(r.integrate(|x| x.powi(5)), 64.0 / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn cumulative_matrix_is_exact_on_polynomials() {
        let r = CompositeRule::new(0.0, 1.0, 2, 6);
        let s = r.cumulative_matrix();
        for (i, &t) in r.nodes.iter().enumerate() {
            let approx: f64 = (0..r.nodes.len()).map(|k| s[i][k] * r.nodes[k].powi(3)).sum();
            assert_relative_eq!(approx, t.powi(4) / 4.0, epsilon = 1e-13);
        }
        let w = r.weights_up_to(0.7);
        let approx: f64 = w.iter().zip(&r.nodes).map(|(w, x)| w * x * x).sum();
        assert_relative_eq!(approx, 0.7f64.powi(3) / 3.0, epsilon = 1e-13);
    }

    #[test]
    fn adaptive_handles_peaks() {
        let (v, _) = integrate(|x| 1.0 / (1e-4 + x * x), -1.0, 1.0, 1e-10, 0.0).unwrap();
        assert_relative_eq!(v, 2.0 * 100.0 * (100.0f64).atan(), max_relative = 1e-9);
    }
}
