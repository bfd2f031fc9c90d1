//! Closed-form operators of the free wave equation d_t^2 u - Laplace u = f.
//!
//! Everything here is written directly from the spectral formulas and never
//! goes through the factorization/eikonal/propagator pipeline, so it can be
//! used to check that pipeline.

use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::{norm, Grid};
use crate::operator::{multiplier_row, GridOperator};
use crate::stochastic::{FtMode, SourceKernel};
use crate::symbol::Symbol;

/// sin(tau |xi|) / |xi|, continued by tau at xi = 0.
pub fn fundamental_ft(tau: f64, xi: &[f64]) -> f64 {
    let r = norm(xi);
    if r * tau.abs() < 1e-8 {
        // sin(a r)/r = a (1 - (a r)^2 / 6 + ...)
        tau * (1.0 - (tau * r).powi(2) / 6.0)
    } else {
        (tau * r).sin() / r
    }
}

/// d/dtau of sin(tau |xi|) / |xi|.
pub fn fundamental_ft_dt(tau: f64, xi: &[f64]) -> f64 {
    (tau * norm(xi)).cos()
}

#[derive(Debug, Clone, Copy)]
pub struct WaveOracle {
    pub dim: usize,
}

impl WaveOracle {
    pub fn new(dim: usize) -> WaveOracle {
        WaveOracle { dim }
    }

    /// Symbol of the operator taking u(s) to u(t).
    pub fn position_symbol(&self, t: f64, s: f64, xi: &[f64]) -> f64 {
        ((t - s) * norm(xi)).cos()
    }

    /// Symbol of the operator taking d_t u(s) to u(t).
    pub fn velocity_symbol(&self, t: f64, s: f64, xi: &[f64]) -> f64 {
        fundamental_ft(t - s, xi)
    }

    /// Symbol of the source operator: u(t) = int_0^t T(t, s) f(s) ds.
    pub fn source_symbol(&self, t: f64, s: f64, xi: &[f64]) -> f64 {
        fundamental_ft(t - s, xi)
    }

    /// The two phases x.xi -/+ (t - s)|xi|.
    pub fn phases(&self, t: f64, s: f64, x: &[f64], xi: &[f64]) -> [f64; 2] {
        let lin: f64 = x.iter().zip(xi).map(|(a, b)| a * b).sum();
        let shift = (t - s) * norm(xi);
        [lin - shift, lin + shift]
    }

    /// |symbols| <= max(1, t - s).
    pub fn symbol_bound(&self, t: f64, s: f64) -> f64 {
        (t - s).max(1.0)
    }
}

/// Fourier-multiplier operators for data at time s propagated to t.
#[derive(Debug, Clone)]
pub struct WaveOps {
    pub position: GridOperator,
    pub velocity: GridOperator,
    pub source: GridOperator,
}

pub fn wave_ops(grid: &Arc<Grid>, t: f64, s: f64) -> Result<WaveOps> {
    if t < s {
        return Err(Error::Contract(format!("wave_ops needs t >= s, got t={t}, s={s}")));
    }
    let d = grid.dim();
    let tau = t - s;
    let position = Symbol::multiplier(d, 0.0, move |_, xi| Complex64::new((tau * norm(xi)).cos(), 0.0)).time_independent();
    let sinc = move |_: f64, xi: &[f64]| Complex64::new(fundamental_ft(tau, xi), 0.0);
    let velocity = Symbol::multiplier(d, -1.0, sinc).time_independent();
    let source = Symbol::multiplier(d, -1.0, sinc).time_independent();
    Ok(WaveOps {
        position: GridOperator::pdo(position, grid),
        velocity: GridOperator::pdo(velocity, grid),
        source: GridOperator::pdo(source, grid),
    })
}

/// Source kernel of the free wave equation on a grid, with continuous
/// kernel transforms e^{-i x.xi} sin((t - s)|xi|)/|xi|.
#[derive(Debug, Clone)]
pub struct WaveKernel {
    grid: Arc<Grid>,
    horizon: f64,
}

impl WaveKernel {
    pub fn new(grid: &Arc<Grid>, horizon: f64) -> WaveKernel {
        WaveKernel { grid: grid.clone(), horizon }
    }

    fn check(&self, t: f64, s: f64) -> Result<()> {
        if t > self.horizon * (1.0 + 1e-12) {
            return Err(Error::Horizon { t, horizon: self.horizon });
        }
        if s > t || s < 0.0 {
            return Err(Error::Contract(format!("need 0 <= s <= t, got s={s}, t={t}")));
        }
        Ok(())
    }
}

impl SourceKernel for WaveKernel {
    fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn order(&self) -> usize {
        2
    }

    fn source_row(&self, t: f64, s: f64, x: &[f64]) -> Result<Vec<Complex64>> {
        self.check(t, s)?;
        multiplier_row(&self.grid, x, |xi| Complex64::new(fundamental_ft(t - s, xi), 0.0))
    }

    fn initial_row(&self, l: usize, t: f64, x: &[f64]) -> Result<Vec<Complex64>> {
        self.check(t, 0.0)?;
        match l {
            0 => multiplier_row(&self.grid, x, |xi| Complex64::new((t * norm(xi)).cos(), 0.0)),
            1 => multiplier_row(&self.grid, x, |xi| Complex64::new(fundamental_ft(t, xi), 0.0)),
            _ => Err(Error::Contract(format!("the wave equation has initial data u, d_t u; got index {l}"))),
        }
    }

    fn ft_mode(&self) -> FtMode {
        FtMode::Continuous { radial: true }
    }

    fn kernel_ft(&self, t: f64, s: f64, x: &[f64], xi: &[f64]) -> Result<Complex64> {
        self.check(t, s)?;
        let ph: f64 = -x.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
        Ok(Complex64::from_polar(fundamental_ft(t - s, xi), ph))
    }
}

/// Energy (1/2)(|d_t u|^2 + |grad u|^2) of the free evolution of (u0, u1)
/// at time t, computed mode by mode on the lattice.
pub fn energy(grid: &Arc<Grid>, u0: &crate::grid::Field, u1: &crate::grid::Field, t: f64) -> Result<f64> {
    let f0 = crate::grid::forward_ft(u0)?;
    let f1 = crate::grid::forward_ft(u1)?;
    let mut total = 0.0;
    for k in 0..grid.total() {
        let xi = grid.xi(k);
        let r = norm(&xi);
        let (c, s) = ((t * r).cos(), (t * r).sin());
        let u = f0.data()[k] * c + f1.data()[k] * fundamental_ft(t, &xi);
        let ut = -f0.data()[k] * r * s + f1.data()[k] * c;
        total += ut.norm_sqr() + r * r * u.norm_sqr();
    }
    let w = grid.dual_cell_volume() / (2.0 * std::f64::consts::PI).powi(grid.dim() as i32);
    Ok(0.5 * total * w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Field, Side};
    use std::f64::consts::PI;

    #[test]
    fn zero_mode_limit() {
        assert_eq!(fundamental_ft(0.7, &[0.0]), 0.7);
        assert!((fundamental_ft(2.0, &[PI / 2.0])).abs() < 1e-15);
        assert!((fundamental_ft(0.3, &[1e-10]) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn equal_times_give_identity_and_zero() {
        let g = Grid::new(1, 2.0 * PI, 16).unwrap();
        let ops = wave_ops(&g, 0.4, 0.4).unwrap();
        let v = Field::from_real_fn(&g, |x| x[0].sin() + 0.5 * (2.0 * x[0]).cos());
        assert!(ops.position.apply(&v, 0.0, 0.0).unwrap().max_abs_diff(&v) < 1e-13);
        assert!(ops.source.apply(&v, 0.0, 0.0).unwrap().max_abs() < 1e-13);
        assert_eq!(Side::Physical, v.side());
    }

    #[test]
    fn time_derivative_of_source_symbol() {
        let o = WaveOracle::new(1);
        for xi in [0.3, 1.0, 7.5] {
            let h = 1e-5;
            let fd = (o.source_symbol(1.0 + h, 0.0, &[xi]) - o.source_symbol(1.0 - h, 0.0, &[xi])) / (2.0 * h);
            assert!((fd - o.position_symbol(1.0, 0.0, &[xi])).abs() < 1e-6);
        }
    }
}
