//! Application of PDOs and FIOs to grid fields.
//!
//! An operator pairs a symbol p(t, x, xi) with a phase phi(t, s, x, xi) and
//! acts by x -> (2 pi)^-d sum_xi e^{i phi} p (Fv)(xi) (2 pi / L)^d.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::eikonal::{PhaseAt, PhaseFunction};
use crate::error::{Error, Result};
use crate::grid::{forward_ft, inverse_ft, japanese_bracket, Field, Grid, Side};
use crate::symbol::Symbol;

pub type Profile = Arc<dyn Fn(f64, &[f64]) -> Complex64 + Send + Sync>;

const MAX_RANK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// sum_j a_j(t, x) b_j(t, xi) with a shift phase: one FFT pair per term.
    Separable,
    /// Full lattice sum per output point, O(N^{2d}).
    Dense,
}

#[derive(Clone)]
pub struct GridOperator {
    symbol: Symbol,
    phase: PhaseFunction,
    grid: Arc<Grid>,
    strategy: Strategy,
    terms: Vec<(Option<Profile>, Symbol)>,
}

impl fmt::Debug for GridOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GridOperator")
            .field("symbol", &self.symbol)
            .field("phase", &self.phase)
            .field("grid", &self.grid)
            .field("strategy", &self.strategy)
            .field("rank", &self.terms.len())
            .finish()
    }
}

impl GridOperator {
    /// Picks the separable path when p does not depend on x and the phase is
    /// a shift of x.xi, the dense path otherwise.
    pub fn new(symbol: Symbol, phase: PhaseFunction, grid: &Arc<Grid>) -> GridOperator {
        let strategy = if symbol.is_x_independent() && phase.is_shift() { Strategy::Separable } else { Strategy::Dense };
        let terms = vec![(None, symbol.clone())];
        GridOperator { symbol, phase, grid: grid.clone(), strategy, terms }
    }

    pub fn pdo(symbol: Symbol, grid: &Arc<Grid>) -> GridOperator {
        let dim = grid.dim();
        GridOperator::new(symbol, PhaseFunction::linear(dim), grid)
    }

    /// p = sum_j a_j(t, x) b_j(t, xi), at most 8 terms.
    pub fn separable(terms: Vec<(Profile, Symbol)>, phase: PhaseFunction, grid: &Arc<Grid>) -> Result<GridOperator> {
        if terms.is_empty() || terms.len() > MAX_RANK {
            return Err(Error::Contract(format!("separable rank must be 1..={MAX_RANK}, got {}", terms.len())));
        }
        if !phase.is_shift() {
            return Err(Error::Contract("separable operators need a phase of the form x.xi - psi(t, s, xi)".into()));
        }
        if terms.iter().any(|(_, b)| !b.is_x_independent()) {
            return Err(Error::Contract("separable factors b_j must not depend on x".into()));
        }
        let dim = grid.dim();
        let pieces: Vec<(Profile, Symbol)> = terms.clone();
        let order = terms.iter().map(|(_, b)| b.order()).fold(f64::NEG_INFINITY, f64::max);
        let t_indep = terms.iter().all(|(_, b)| b.is_t_independent());
        let mut symbol = Symbol::new(dim, order, move |t, x, xi| pieces.iter().map(|(a, b)| a(t, x) * b.eval(t, x, xi)).sum());
        if t_indep {
            symbol = symbol.time_independent();
        }
        let symbol = symbol.with_grid_step(grid);
        Ok(GridOperator {
            symbol,
            phase,
            grid: grid.clone(),
            strategy: Strategy::Separable,
            terms: terms.into_iter().map(|(a, b)| (Some(a), b)).collect(),
        })
    }

    /// Forces the dense lattice sum.
    pub fn dense(mut self) -> GridOperator {
        self.strategy = Strategy::Dense;
        self
    }

    pub fn symbol(&self) -> &Symbol {
        &self.symbol
    }

    pub fn phase(&self) -> &PhaseFunction {
        &self.phase
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    /// Number of (phase, symbol) evaluations per application.
    pub fn cost(&self) -> usize {
        let m = self.grid.total();
        match self.strategy {
            Strategy::Separable => self.terms.len() * m,
            Strategy::Dense => m * m,
        }
    }

    pub fn apply(&self, v: &Field, t: f64, s: f64) -> Result<Field> {
        self.check_field(v)?;
        let fv = if v.side() == Side::Physical { forward_ft(v)? } else { v.clone() };
        match self.strategy {
            Strategy::Separable => self.apply_separable(&fv, t, s),
            Strategy::Dense => self.apply_dense(&fv, t, s),
        }
    }

    fn check_field(&self, v: &Field) -> Result<()> {
        if v.grid().total() != self.grid.total() || v.grid().dim() != self.grid.dim() {
            return Err(Error::Contract("field and operator live on different grids".into()));
        }
        if v.side() != Side::Physical {
            return Err(Error::Contract("apply expects a physical-side field".into()));
        }
        Ok(())
    }

    fn apply_separable(&self, fv: &Field, t: f64, s: f64) -> Result<Field> {
        let g = &self.grid;
        let origin = vec![0.0; g.dim()];
        let mut out = Field::zeros(g, Side::Physical);
        for (a, b) in &self.terms {
            let mut spec = fv.clone();
            for (i, val) in spec.data_mut().iter_mut().enumerate() {
                let xi = g.xi(i);
                let m = b.eval(t, &origin, &xi) * Complex64::from_polar(1.0, -self.phase.shift(t, s, &xi));
                if !m.re.is_finite() || !m.im.is_finite() {
                    return Err(Error::NonFinite { t, x: origin.clone(), xi });
                }
                *val *= m;
            }
            let w = inverse_ft(&spec)?;
            match a {
                None => out.axpy(Complex64::new(1.0, 0.0), &w)?,
                Some(a) => {
                    for (i, (o, wv)) in out.data_mut().iter_mut().zip(w.data()).enumerate() {
                        *o += a(t, &g.point(i)) * wv;
                    }
                }
            }
        }
        Ok(out)
    }

    fn apply_dense(&self, fv: &Field, t: f64, s: f64) -> Result<Field> {
        let g = &self.grid;
        let m = g.total();
        let xis = g.xis();
        let scale = 1.0 / g.len().powi(g.dim() as i32);
        let ph = self.phase.at(t, s);
        let data: Result<Vec<Complex64>> = (0..m)
            .into_par_iter()
            .map(|i| {
                let x = g.point(i);
                let mut acc = Complex64::new(0.0, 0.0);
                for (k, xi) in xis.iter().enumerate() {
                    let e = self.amplitude_at(&ph, t, &x, xi)?;
                    acc += e * fv.data()[k];
                }
                Ok(acc * scale)
            })
            .collect();
        Field::from_vec(g, data?, Side::Physical)
    }

    /// e^{i phi(t, s, x, xi)} p(t, x, xi) with a finiteness check.
    pub fn amplitude(&self, t: f64, s: f64, x: &[f64], xi: &[f64]) -> Result<Complex64> {
        self.amplitude_at(&self.phase.at(t, s), t, x, xi)
    }

    fn amplitude_at(&self, ph: &PhaseAt, t: f64, x: &[f64], xi: &[f64]) -> Result<Complex64> {
        let e = Complex64::from_polar(1.0, ph.eval(x, xi)) * self.symbol.eval(t, x, xi);
        if e.re.is_finite() && e.im.is_finite() {
            Ok(e)
        } else {
            Err(Error::NonFinite { t, x: x.to_vec(), xi: xi.to_vec() })
        }
    }

    /// Fourier transform of the Schwartz kernel K(x, .) at eta:
    /// e^{i phi(t, s, x, -eta)} p(t, x, -eta).
    pub fn kernel_ft(&self, x: &[f64], eta: &[f64], t: f64, s: f64) -> Complex64 {
        let neg: Vec<f64> = eta.iter().map(|v| -v).collect();
        Complex64::from_polar(1.0, self.phase.eval(t, s, x, &neg)) * self.symbol.eval(t, x, &neg)
    }

    /// Matrix A with (Av)_i = sum_j A_ij v_j on the grid.
    pub fn dense_matrix(&self, t: f64, s: f64) -> Result<DMatrix<Complex64>> {
        let g = &self.grid;
        let m = g.total();
        match self.strategy {
            Strategy::Separable => {
                let mut a = DMatrix::zeros(m, m);
                for j in 0..m {
                    let mut e = Field::zeros(g, Side::Physical);
                    e.data_mut()[j] = Complex64::new(1.0, 0.0);
                    let col = self.apply(&e, t, s)?;
                    for i in 0..m {
                        a[(i, j)] = col.data()[i];
                    }
                }
                Ok(a)
            }
            Strategy::Dense => {
                let ph = self.phase.at(t, s);
                fio_matrix(g, |x, xi| self.amplitude_at(&ph, t, x, xi))
            }
        }
    }
}

/// Row r of a Fourier multiplier at the point x: (Av)(x) = sum_j r_j v(x_j)
/// with r_j = N^-d sum_k e^{i (x - x_j) . xi_k} m(xi_k).
pub fn multiplier_row(g: &Arc<Grid>, x: &[f64], m: impl Fn(&[f64]) -> Complex64 + Sync) -> Result<Vec<Complex64>> {
    let conj_a: Vec<Complex64> = (0..g.total())
        .into_par_iter()
        .map(|k| {
            let xi = g.xi(k);
            let ph: f64 = x.iter().zip(&xi).map(|(a, b)| a * b).sum();
            (Complex64::from_polar(1.0, ph) * m(&xi)).conj()
        })
        .collect();
    let back = inverse_ft(&Field::from_vec(g, conj_a, Side::Spectral)?)?;
    let scale = g.len().powi(g.dim() as i32) / g.total() as f64;
    Ok(back.data().iter().map(|v| v.conj() * scale).collect())
}

/// Grid matrix of the operator with amplitude a(x, xi) = e^{i phi} p:
/// A_ij = N^-d sum_k a(x_i, xi_k) e^{-i y_j . xi_k}.
pub fn fio_matrix(g: &Arc<Grid>, amp: impl Fn(&[f64], &[f64]) -> Result<Complex64> + Sync) -> Result<DMatrix<Complex64>> {
    let m = g.total();
    let xis = g.xis();
    let pts = g.points();
    let vals: Result<Vec<Complex64>> = (0..m * m).into_par_iter().map(|idx| amp(&pts[idx / m], &xis[idx % m])).collect();
    let a = DMatrix::from_row_slice(m, m, &vals?);
    Ok(a * dft_matrix(g))
}

/// D_kj = N^-d e^{-i y_j . xi_k}, so that A = amplitude * D.
pub fn dft_matrix(g: &Grid) -> DMatrix<Complex64> {
    let m = g.total();
    let xis = g.xis();
    let pts = g.points();
    let inv = 1.0 / m as f64;
    DMatrix::from_fn(m, m, |k, j| {
        let ph: f64 = xis[k].iter().zip(&pts[j]).map(|(a, b)| a * b).sum();
        Complex64::from_polar(inv, -ph)
    })
}

/// Sobolev norm ((2 pi)^-d sum_xi <xi>^{2r} |Fv|^2 (2 pi / L)^d)^{1/2}.
pub fn sobolev_norm(v: &Field, r: f64) -> Result<f64> {
    let fv = if v.side() == Side::Physical { forward_ft(v)? } else { v.clone() };
    let g = fv.grid();
    let s: f64 = fv.data().iter().enumerate().map(|(i, c)| japanese_bracket(&g.xi(i)).powf(2.0 * r) * c.norm_sqr()).sum();
    Ok((s / g.len().powi(g.dim() as i32)).sqrt())
}

/// Fourier multiplier m(xi) applied to a physical-side field.
pub fn apply_multiplier(v: &Field, m: impl Fn(&[f64]) -> Complex64) -> Result<Field> {
    let mut fv = forward_ft(v)?;
    let g = fv.grid().clone();
    for (i, val) in fv.data_mut().iter_mut().enumerate() {
        *val *= m(&g.xi(i));
    }
    inverse_ft(&fv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn c(v: f64) -> Complex64 {
        Complex64::new(v, 0.0)
    }

    #[test]
    fn identity_and_multiplier() {
        let g = Grid::new(1, 2.0 * PI, 32).unwrap();
        let v = Field::from_real_fn(&g, |x| (x[0]).sin() + 0.5 * (3.0 * x[0]).cos());
        let id = GridOperator::pdo(Symbol::constant(1, c(1.0)), &g);
        assert!(id.apply(&v, 0.0, 0.0).unwrap().max_abs_diff(&v) < 1e-12);
        let b2 = GridOperator::pdo(Symbol::bracket(1, 2.0), &g);
        let e = Field::from_fn(&g, |x| Complex64::from_polar(1.0, 3.0 * x[0]));
        let out = b2.apply(&e, 0.0, 0.0).unwrap();
        assert!(out.max_abs_diff(&e.scaled(c(10.0))) < 1e-11);
    }

    #[test]
    fn dense_matches_separable() {
        let g = Grid::new(1, 2.0 * PI, 16).unwrap();
        let v = Field::from_real_fn(&g, |x| (-(x[0] * x[0])).exp());
        let op = GridOperator::new(Symbol::abs_xi(1), PhaseFunction::transport(1, 0.7), &g);
        let fast = op.apply(&v, 0.4, 0.1).unwrap();
        let slow = op.clone().dense().apply(&v, 0.4, 0.1).unwrap();
        assert!(fast.max_abs_diff(&slow) < 1e-12);
        let a = op.clone().dense().dense_matrix(0.4, 0.1).unwrap();
        let b = op.dense_matrix(0.4, 0.1).unwrap();
        assert!((a - b).iter().map(|v| v.norm()).fold(0.0, f64::max) < 1e-12);
    }

    #[test]
    fn sobolev_zero_is_l2() {
        let g = Grid::new(1, 2.0 * PI, 32).unwrap();
        let v = Field::from_fn(&g, |x| Complex64::from_polar(1.0, 2.0 * x[0]));
        assert!((sobolev_norm(&v, 0.0).unwrap() - v.l2_norm()).abs() < 1e-12);
        assert_eq!(sobolev_norm(&Field::zeros(&g, Side::Physical), 1.0).unwrap(), 0.0);
    }
}
