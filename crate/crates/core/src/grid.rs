//! Periodic grid on [-L/2, L/2)^d with the continuum Fourier convention
//! (Ff)(xi) = sum_x e^{-i x.xi} f(x) h^d and its inverse.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub struct Grid {
    dim: usize,
    len: f64,
    n: usize,
    h: f64,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid")
            .field("dim", &self.dim)
            .field("len", &self.len)
            .field("n", &self.n)
            .finish()
    }
}

impl Grid {
    pub fn new(dim: usize, len: f64, n: usize) -> Result<Arc<Grid>> {
        if !(1..=3).contains(&dim) {
            return Err(Error::Grid(format!("dimension {dim} not in 1..=3")));
        }
        if !(len > 0.0 && len.is_finite()) {
            return Err(Error::Grid(format!("side length {len} must be positive")));
        }
        if n < 2 || !n.is_power_of_two() {
            return Err(Error::Grid(format!("points per axis {n} must be a power of two >= 2")));
        }
        let mut planner = FftPlanner::new();
        Ok(Arc::new(Grid {
            dim,
            len,
            n,
            h: len / n as f64,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> f64 {
        self.len
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn total(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    /// Dual lattice spacing 2pi/L.
    pub fn dxi(&self) -> f64 {
        2.0 * PI / self.len
    }

    /// Largest |xi| along an axis, (N/2) 2pi/L.
    pub fn xi_max(&self) -> f64 {
        PI * self.n as f64 / self.len
    }

    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.dim as i32)
    }

    pub fn dual_cell_volume(&self) -> f64 {
        self.dxi().powi(self.dim as i32)
    }

    pub fn coord(&self, j: usize) -> f64 {
        -0.5 * self.len + j as f64 * self.h
    }

    /// Signed frequency index of FFT slot k.
    pub fn freq(&self, k: usize) -> i64 {
        if k < self.n / 2 {
            k as i64
        } else {
            k as i64 - self.n as i64
        }
    }

    pub fn slot(&self, kappa: i64) -> Option<usize> {
        let half = (self.n / 2) as i64;
        if kappa < -half || kappa >= half {
            return None;
        }
        Some(if kappa >= 0 { kappa as usize } else { (kappa + self.n as i64) as usize })
    }

    pub fn multi_index(&self, flat: usize) -> [usize; 3] {
        let mut idx = [0usize; 3];
        let mut r = flat;
        for a in (0..self.dim).rev() {
            idx[a] = r % self.n;
            r /= self.n;
        }
        idx
    }

    pub fn flat(&self, idx: &[usize]) -> usize {
        idx.iter().take(self.dim).fold(0, |acc, &i| acc * self.n + i)
    }

    pub fn point(&self, flat: usize) -> Vec<f64> {
        let idx = self.multi_index(flat);
        (0..self.dim).map(|a| self.coord(idx[a])).collect()
    }

    pub fn lattice(&self, flat: usize) -> Vec<i64> {
        let idx = self.multi_index(flat);
        (0..self.dim).map(|a| self.freq(idx[a])).collect()
    }

    pub fn xi(&self, flat: usize) -> Vec<f64> {
        let dxi = self.dxi();
        self.lattice(flat).into_iter().map(|k| k as f64 * dxi).collect()
    }

    /// Flat spectral index of the lattice point with signed indices `kappa`.
    pub fn flat_of_lattice(&self, kappa: &[i64]) -> Option<usize> {
        let mut idx = [0usize; 3];
        for a in 0..self.dim {
            idx[a] = self.slot(kappa[a])?;
        }
        Some(self.flat(&idx[..self.dim]))
    }

    /// Nearest lattice point to a physical frequency.
    pub fn nearest_lattice(&self, xi: &[f64]) -> Vec<i64> {
        xi.iter().map(|v| (v / self.dxi()).round() as i64).collect()
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.total()).map(|i| self.point(i)).collect()
    }

    pub fn xis(&self) -> Vec<Vec<f64>> {
        (0..self.total()).map(|i| self.xi(i)).collect()
    }

    fn parity(&self, flat: usize) -> f64 {
        let idx = self.multi_index(flat);
        if idx[..self.dim].iter().sum::<usize>() % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    fn fft_nd(&self, data: &mut [Complex64], inverse: bool) {
        let plan = if inverse { &self.inv } else { &self.fwd };
        let n = self.n;
        if self.dim == 1 {
            plan.process(data);
            return;
        }
        let mut line = vec![Complex64::new(0.0, 0.0); n];
        for axis in 0..self.dim {
            let stride = n.pow((self.dim - 1 - axis) as u32);
            let block = stride * n;
            for base in (0..data.len()).step_by(block) {
                for off in 0..stride {
                    let start = base + off;
                    for (j, v) in line.iter_mut().enumerate() {
                        *v = data[start + j * stride];
                    }
                    plan.process(&mut line);
                    for (j, v) in line.iter().enumerate() {
                        data[start + j * stride] = *v;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Physical,
    Spectral,
}

#[derive(Debug, Clone)]
pub struct Field {
    grid: Arc<Grid>,
    data: Vec<Complex64>,
    side: Side,
}

impl Field {
    pub fn zeros(grid: &Arc<Grid>, side: Side) -> Field {
        Field { grid: grid.clone(), data: vec![Complex64::new(0.0, 0.0); grid.total()], side }
    }

    pub fn from_vec(grid: &Arc<Grid>, data: Vec<Complex64>, side: Side) -> Result<Field> {
        if data.len() != grid.total() {
            return Err(Error::Contract(format!(
                "field length {} does not match grid size {}",
                data.len(),
                grid.total()
            )));
        }
        Ok(Field { grid: grid.clone(), data, side })
    }

    pub fn from_fn(grid: &Arc<Grid>, f: impl Fn(&[f64]) -> Complex64) -> Field {
        let data = (0..grid.total()).map(|i| f(&grid.point(i))).collect();
        Field { grid: grid.clone(), data, side: Side::Physical }
    }

    pub fn from_real_fn(grid: &Arc<Grid>, f: impl Fn(&[f64]) -> f64) -> Field {
        Field::from_fn(grid, |x| Complex64::new(f(x), 0.0))
    }

    /// Spectral field from a function of the physical frequency.
    pub fn spectral_from_fn(grid: &Arc<Grid>, f: impl Fn(&[f64]) -> Complex64) -> Field {
        let data = (0..grid.total()).map(|i| f(&grid.xi(i))).collect();
        Field { grid: grid.clone(), data, side: Side::Spectral }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    /// Spectral value at signed lattice indices.
    pub fn at_lattice(&self, kappa: &[i64]) -> Option<Complex64> {
        self.grid.flat_of_lattice(kappa).map(|i| self.data[i])
    }

    pub fn scaled(&self, c: Complex64) -> Field {
        Field { grid: self.grid.clone(), data: self.data.iter().map(|v| v * c).collect(), side: self.side }
    }

    pub fn axpy(&mut self, a: Complex64, other: &Field) -> Result<()> {
        self.check_compatible(other)?;
        for (v, w) in self.data.iter_mut().zip(&other.data) {
            *v += a * w;
        }
        Ok(())
    }

    fn check_compatible(&self, other: &Field) -> Result<()> {
        if !Arc::ptr_eq(&self.grid, &other.grid) && self.grid.total() != other.grid.total() {
            return Err(Error::Contract("fields live on different grids".into()));
        }
        if self.side != other.side {
            return Err(Error::Contract("fields live on different sides".into()));
        }
        Ok(())
    }

    /// Discrete L2 norm with the measure of the field's side.
    pub fn l2_norm(&self) -> f64 {
        let s: f64 = self.data.iter().map(|v| v.norm_sqr()).sum();
        match self.side {
            Side::Physical => (s * self.grid.cell_volume()).sqrt(),
            Side::Spectral => {
                let w = self.grid.dual_cell_volume() / (2.0 * PI).powi(self.grid.dim as i32);
                (s * w).sqrt()
            }
        }
    }

    pub fn max_abs_diff(&self, other: &Field) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Hermitian symmetry g(-xi) = conj g(xi) over lattice pairs that stay inside the lattice.
    pub fn hermitian_defect(&self) -> Result<f64> {
        if self.side != Side::Spectral {
            return Err(Error::Contract("hermitian_defect needs a spectral field".into()));
        }
        let g = &self.grid;
        let mut worst: f64 = 0.0;
        for i in 0..g.total() {
            let k = g.lattice(i);
            let neg: Vec<i64> = k.iter().map(|v| -v).collect();
            if let Some(j) = g.flat_of_lattice(&neg) {
                worst = worst.max((self.data[j] - self.data[i].conj()).norm());
            }
        }
        Ok(worst)
    }
}

pub fn forward_ft(f: &Field) -> Result<Field> {
    if f.side != Side::Physical {
        return Err(Error::Contract("forward_ft expects a physical-side field".into()));
    }
    let g = &f.grid;
    let mut data = f.data.clone();
    g.fft_nd(&mut data, false);
    let w = g.cell_volume();
    for (i, v) in data.iter_mut().enumerate() {
        *v *= w * g.parity(i);
    }
    Ok(Field { grid: g.clone(), data, side: Side::Spectral })
}

pub fn inverse_ft(f: &Field) -> Result<Field> {
    if f.side != Side::Spectral {
        return Err(Error::Contract("inverse_ft expects a spectral-side field".into()));
    }
    let g = &f.grid;
    let mut data: Vec<Complex64> = f.data.iter().enumerate().map(|(i, v)| v * g.parity(i)).collect();
    g.fft_nd(&mut data, true);
    let w = 1.0 / g.len.powi(g.dim as i32);
    for v in data.iter_mut() {
        *v *= w;
    }
    Ok(Field { grid: g.clone(), data, side: Side::Physical })
}

pub fn norm(xi: &[f64]) -> f64 {
    xi.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn japanese_bracket(xi: &[f64]) -> f64 {
    (1.0 + xi.iter().map(|v| v * v).sum::<f64>()).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    #[test]
    fn constant_maps_to_spike() {
        let g = Grid::new(1, 10.0, 16).unwrap();
        let f = Field::from_real_fn(&g, |_| 1.0);
        let s = forward_ft(&f).unwrap();
        assert_relative_eq!(s.at_lattice(&[0]).unwrap().re, 10.0, epsilon = 1e-12);
        for k in 1..8 {
            assert!(s.at_lattice(&[k]).unwrap().norm() < 1e-12);
        }
        let back = inverse_ft(&s).unwrap();
        assert!(back.max_abs_diff(&f) < 1e-13);
    }

    #[test]
    fn plane_wave_spike() {
        let g = Grid::new(1, 2.0 * PI, 32).unwrap();
        let xi1 = 3.0 * g.dxi();
        let f = Field::from_fn(&g, |x| Complex64::from_polar(1.0, xi1 * x[0]));
        let s = forward_ft(&f).unwrap();
        for i in 0..g.total() {
            let expect = if g.lattice(i)[0] == 3 { g.len() } else { 0.0 };
            assert!((s.data()[i] - c(expect)).norm() < 1e-12);
        }
    }

    #[test]
    fn gaussian_matches_closed_form() {
        let g = Grid::new(1, 40.0, 512).unwrap();
        let f = Field::from_real_fn(&g, |x| (-0.5 * x[0] * x[0]).exp());
        let s = forward_ft(&f).unwrap();
        for i in 0..g.total() {
            let xi = g.xi(i)[0];
            let expect = (2.0 * PI).sqrt() * (-0.5 * xi * xi).exp();
            assert!((s.data()[i] - c(expect)).norm() < 1e-10, "xi={xi}");
        }
    }

    #[test]
    fn japanese_bracket_values() {
        assert_eq!(japanese_bracket(&[0.0]), 1.0);
        assert_relative_eq!(japanese_bracket(&[3.0, 4.0]), 26f64.sqrt());
        assert_relative_eq!(japanese_bracket(&[1.0, 0.0, 0.0]), 2f64.sqrt());
    }

    #[test]
    fn side_mismatch_is_rejected() {
        let g = Grid::new(1, 1.0, 8).unwrap();
        let f = Field::zeros(&g, Side::Spectral);
        assert!(forward_ft(&f).is_err());
        assert!(inverse_ft(&Field::zeros(&g, Side::Physical)).is_err());
    }

    #[test]
    fn spike_inverts_to_constant() {
        let g = Grid::new(2, 5.0, 8).unwrap();
        let mut s = Field::zeros(&g, Side::Spectral);
        let i0 = g.flat_of_lattice(&[0, 0]).unwrap();
        s.data_mut()[i0] = c(25.0);
        let f = inverse_ft(&s).unwrap();
        for v in f.data() {
            assert!((v - c(1.0)).norm() < 1e-13);
        }
    }

    #[test]
    fn bad_grids_rejected() {
        assert!(Grid::new(0, 1.0, 8).is_err());
        assert!(Grid::new(4, 1.0, 8).is_err());
        assert!(Grid::new(1, -1.0, 8).is_err());
        assert!(Grid::new(1, 1.0, 12).is_err());
    }
}
