//! Periodic complex fields on the torus `[-L, L)^d` and their Fourier side.
//!
//! Spectra hold the true Fourier coefficients `u(x) = sum_k c_k e^{i xi_k . x}`,
//! stored in FFT order per axis. Physical samples sit at `x_j = -L + 2 L j / N`.

use std::cell::RefCell;
use std::fmt::Write as _;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::nonlinearity::NonlinearitySpec;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub d: usize,
    pub n: usize,
    pub l: f64,
}

impl GridSpec {
    pub fn new(d: usize, n: usize, l: f64) -> Result<Self> {
        let g = Self { d, n, l };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d == 1 || self.d == 2) {
            return Err(Error::domain(format!("dimension must be 1 or 2, got {}", self.d)));
        }
        if self.n < 8 || !self.n.is_power_of_two() {
            return Err(Error::domain(format!(
                "modes per dimension must be a power of two >= 8, got {}",
                self.n
            )));
        }
        if !(self.l > 0.0 && self.l.is_finite()) {
            return Err(Error::domain(format!("half-width L must be positive, got {}", self.l)));
        }
        Ok(())
    }

    /// Total number of grid points `N^d`.
    pub fn len(&self) -> usize {
        self.n.pow(self.d as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cell_measure(&self) -> f64 {
        (2.0 * self.l / self.n as f64).powi(self.d as i32)
    }

    pub fn volume(&self) -> f64 {
        (2.0 * self.l).powi(self.d as i32)
    }

    /// Signed wavenumber `k` of FFT slot `j`.
    pub fn wavenumber(&self, j: usize) -> i64 {
        if j < self.n / 2 {
            j as i64
        } else {
            j as i64 - self.n as i64
        }
    }

    /// FFT slot of signed wavenumber `k`.
    pub fn slot(&self, k: i64) -> usize {
        k.rem_euclid(self.n as i64) as usize
    }

    pub fn coordinate(&self, j: usize) -> f64 {
        -self.l + 2.0 * self.l * j as f64 / self.n as f64
    }

    /// Per-axis slot indices of flat index `idx` (row-major, last axis fastest).
    pub fn unflatten(&self, idx: usize) -> [usize; 2] {
        if self.d == 1 {
            [idx, 0]
        } else {
            [idx / self.n, idx % self.n]
        }
    }

    pub fn flatten(&self, slots: [usize; 2]) -> usize {
        if self.d == 1 {
            slots[0]
        } else {
            slots[0] * self.n + slots[1]
        }
    }

    /// Frequency vector `xi_k = pi k / L` of spectral flat index `idx`.
    pub fn xi(&self, idx: usize) -> [f64; 2] {
        let s = self.unflatten(idx);
        let f = std::f64::consts::PI / self.l;
        let x0 = f * self.wavenumber(s[0]) as f64;
        if self.d == 1 {
            [x0, 0.0]
        } else {
            [x0, f * self.wavenumber(s[1]) as f64]
        }
    }

    pub fn xi_sq(&self, idx: usize) -> f64 {
        let x = self.xi(idx);
        x[0] * x[0] + x[1] * x[1]
    }

    /// Physical coordinates of flat index `idx`.
    pub fn point(&self, idx: usize) -> [f64; 2] {
        let s = self.unflatten(idx);
        if self.d == 1 {
            [self.coordinate(s[0]), 0.0]
        } else {
            [self.coordinate(s[0]), self.coordinate(s[1])]
        }
    }

    /// Spectral flat indices sorted by `|xi|`, ties broken by index.
    pub fn modes_by_frequency(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.xi_sq(a).total_cmp(&self.xi_sq(b)).then(a.cmp(&b)));
        idx
    }
}

/// Sobolev exponent `s` of `H^s`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SobolevIndex(pub f64);

impl SobolevIndex {
    pub const L2: SobolevIndex = SobolevIndex(0.0);
    pub const H1: SobolevIndex = SobolevIndex(1.0);

    pub fn weight(&self, xi_sq: f64) -> f64 {
        if self.0 == 0.0 {
            1.0
        } else {
            (1.0 + xi_sq).powf(self.0)
        }
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plans(n: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft_forward(n), p.plan_fft_inverse(n))
    })
}

fn transform(grid: &GridSpec, data: &mut [Complex64], forward: bool) {
    let n = grid.n;
    let (fwd, inv) = plans(n);
    let plan = if forward { fwd } else { inv };
    if grid.d == 1 {
        plan.process(data);
        return;
    }
    for row in data.chunks_mut(n) {
        plan.process(row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); n];
    for c in 0..n {
        for r in 0..n {
            col[r] = data[r * n + c];
        }
        plan.process(&mut col);
        for r in 0..n {
            data[r * n + c] = col[r];
        }
    }
}

/// `(-1)^{j_1 + j_2}`: the phase from placing the grid origin at `-L`.
fn parity(grid: &GridSpec, idx: usize) -> f64 {
    let s = grid.unflatten(idx);
    if (s[0] + s[1]) % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// A complex field with both physical samples and Fourier coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexField {
    grid: GridSpec,
    values: Vec<Complex64>,
    spectrum: Vec<Complex64>,
}

impl ComplexField {
    pub fn zeros(grid: GridSpec) -> Self {
        let z = vec![Complex64::new(0.0, 0.0); grid.len()];
        Self {
            grid,
            values: z.clone(),
            spectrum: z,
        }
    }

    pub fn from_values(grid: GridSpec, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch);
        }
        let mut spectrum = values.clone();
        transform(&grid, &mut spectrum, true);
        let scale = 1.0 / grid.len() as f64;
        for (i, c) in spectrum.iter_mut().enumerate() {
            *c *= scale * parity(&grid, i);
        }
        Ok(Self {
            grid,
            values,
            spectrum,
        })
    }

    pub fn from_spectrum(grid: GridSpec, spectrum: Vec<Complex64>) -> Result<Self> {
        if spectrum.len() != grid.len() {
            return Err(Error::GridMismatch);
        }
        let mut values: Vec<Complex64> = spectrum
            .iter()
            .enumerate()
            .map(|(i, c)| c * parity(&grid, i))
            .collect();
        transform(&grid, &mut values, false);
        Ok(Self {
            grid,
            values,
            spectrum,
        })
    }

    /// Samples of `g(x)` at the grid points.
    pub fn from_fn<F: Fn([f64; 2]) -> Complex64>(grid: GridSpec, g: F) -> Self {
        let values = (0..grid.len()).map(|i| g(grid.point(i))).collect();
        Self::from_values(grid, values).expect("length matches grid")
    }

    /// `a e^{i xi . x}` for the spectral flat index `idx`.
    pub fn plane_wave(grid: GridSpec, idx: usize, a: Complex64) -> Self {
        let mut spec = vec![Complex64::new(0.0, 0.0); grid.len()];
        spec[idx] = a;
        Self::from_spectrum(grid, spec).expect("length matches grid")
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn spectrum(&self) -> &[Complex64] {
        &self.spectrum
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    fn check_grid(&self, other: &Self) -> Result<()> {
        if self.grid != other.grid {
            Err(Error::GridMismatch)
        } else {
            Ok(())
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_grid(other)?;
        Ok(self.combine(other, Complex64::new(1.0, 0.0)))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_grid(other)?;
        Ok(self.combine(other, Complex64::new(-1.0, 0.0)))
    }

    /// `self + a * other`, combining both representations linearly.
    pub fn axpy(&self, a: Complex64, other: &Self) -> Result<Self> {
        self.check_grid(other)?;
        Ok(self.combine(other, a))
    }

    fn combine(&self, other: &Self, a: Complex64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().zip(&other.values).map(|(x, y)| x + a * y).collect(),
            spectrum: self
                .spectrum
                .iter()
                .zip(&other.spectrum)
                .map(|(x, y)| x + a * y)
                .collect(),
        }
    }

    pub fn scale(&self, a: Complex64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|x| a * x).collect(),
            spectrum: self.spectrum.iter().map(|x| a * x).collect(),
        }
    }

    /// Apply a Fourier multiplier `m(|xi|^2)`.
    pub fn multiply_spectrum<F: Fn(f64) -> Complex64>(&self, m: F) -> Self {
        let spec = self
            .spectrum
            .iter()
            .enumerate()
            .map(|(i, c)| c * m(self.grid.xi_sq(i)))
            .collect();
        Self::from_spectrum(self.grid, spec).expect("length matches grid")
    }

    /// Apply a pointwise map in physical space.
    pub fn map_values<F: Fn(Complex64) -> Complex64>(&self, f: F) -> Self {
        let vals = self.values.iter().map(|&c| f(c)).collect();
        Self::from_values(self.grid, vals).expect("length matches grid")
    }

    pub fn l2_norm_physical(&self) -> f64 {
        (self.grid.cell_measure() * self.values.iter().map(|c| c.norm_sqr()).sum::<f64>()).sqrt()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    /// Row-wise CSV: index column(s), coordinate(s), `re`, `im`.
    pub fn to_csv(&self) -> String {
        let g = &self.grid;
        let mut out = String::new();
        if g.d == 1 {
            out.push_str("i,x,re,im\n");
        } else {
            out.push_str("i,j,x,y,re,im\n");
        }
        for (idx, c) in self.values.iter().enumerate() {
            let s = g.unflatten(idx);
            let p = g.point(idx);
            if g.d == 1 {
                let _ = writeln!(out, "{},{},{},{}", s[0], fmt_f64(p[0]), fmt_f64(c.re), fmt_f64(c.im));
            } else {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    s[0],
                    s[1],
                    fmt_f64(p[0]),
                    fmt_f64(p[1]),
                    fmt_f64(c.re),
                    fmt_f64(c.im)
                );
            }
        }
        out
    }

    /// Inverse of [`ComplexField::to_csv`] given the grid sidecar.
    pub fn from_csv(grid: GridSpec, text: &str) -> Result<Self> {
        let mut values = vec![Complex64::new(0.0, 0.0); grid.len()];
        let cols = if grid.d == 1 { 4 } else { 6 };
        for (line_no, line) in text.lines().enumerate().skip(1) {
            let parts: Vec<&str> = line.split(',').collect();
            let bad = || Error::domain(format!("malformed field CSV at line {}", line_no + 1));
            if parts.len() != cols {
                return Err(bad());
            }
            let idx = if grid.d == 1 {
                parts[0].parse::<usize>().map_err(|_| bad())?
            } else {
                let a = parts[0].parse::<usize>().map_err(|_| bad())?;
                let b = parts[1].parse::<usize>().map_err(|_| bad())?;
                grid.flatten([a, b])
            };
            let re = parts[cols - 2].parse::<f64>().map_err(|_| bad())?;
            let im = parts[cols - 1].parse::<f64>().map_err(|_| bad())?;
            *values.get_mut(idx).ok_or_else(bad)? = Complex64::new(re, im);
        }
        Self::from_values(grid, values)
    }
}

pub fn sobolev_norm(u: &ComplexField, s: SobolevIndex) -> f64 {
    let g = u.grid();
    let sum: f64 = u
        .spectrum()
        .iter()
        .enumerate()
        .map(|(i, c)| s.weight(g.xi_sq(i)) * c.norm_sqr())
        .sum();
    (g.volume() * sum).sqrt()
}

/// `Re int u conj(v)`.
pub fn l2_inner(u: &ComplexField, v: &ComplexField) -> Result<f64> {
    u.check_grid(v)?;
    let sum: f64 = u
        .spectrum()
        .iter()
        .zip(v.spectrum())
        .map(|(a, b)| (a * b.conj()).re)
        .sum();
    Ok(u.grid().volume() * sum)
}

/// Linear group `U(t)`: multiplier `e^{i |xi|^2 t}`.
pub fn apply_group(u: &ComplexField, t: f64) -> ComplexField {
    if t == 0.0 {
        return u.clone();
    }
    u.multiply_spectrum(|x2| Complex64::from_polar(1.0, x2 * t))
}

/// `sup_xi |e^{i|xi|^2 t} - 1| (1 + |xi|^2)^{-gamma}` over the grid spectrum.
pub fn group_deviation_norm(grid: &GridSpec, gamma: f64, t: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::domain(format!("gamma must lie in [0,1), got {gamma}")));
    }
    Ok((0..grid.len())
        .map(|i| {
            let x2 = grid.xi_sq(i);
            // |e^{i theta} - 1| = 2 |sin(theta / 2)|
            2.0 * (0.5 * x2 * t).sin().abs() * (1.0 + x2).powf(-gamma)
        })
        .fold(0.0, f64::max))
}

/// The right side `2^{1-gamma} |t|^gamma` of the group deviation estimate.
pub fn group_deviation_bound(gamma: f64, t: f64) -> f64 {
    2f64.powf(1.0 - gamma) * t.abs().powf(gamma)
}

pub fn mass(u: &ComplexField) -> f64 {
    sobolev_norm(u, SobolevIndex::L2).powi(2)
}

/// `1/2 |grad u|^2 - int G(|u|^2)`.
pub fn hamiltonian(u: &ComplexField, nl: &NonlinearitySpec) -> f64 {
    let g = u.grid();
    let grad_sq: f64 = g.volume()
        * u.spectrum()
            .iter()
            .enumerate()
            .map(|(i, c)| g.xi_sq(i) * c.norm_sqr())
            .sum::<f64>();
    let pot: f64 = g.cell_measure() * u.values().iter().map(|c| nl.potential(c.norm_sqr())).sum::<f64>();
    0.5 * grad_sq - pot
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn bump(grid: GridSpec) -> ComplexField {
        ComplexField::from_fn(grid, |x| {
            let r2 = x[0] * x[0] + x[1] * x[1];
            c((-r2).exp(), 0.3 * x[0] * (-r2).exp())
        })
    }

    #[test]
    fn grid_validation() {
        assert!(GridSpec::new(1, 4, 1.0).is_err());
        assert!(GridSpec::new(1, 12, 1.0).is_err());
        assert!(GridSpec::new(3, 8, 1.0).is_err());
        assert!(GridSpec::new(2, 8, 0.0).is_err());
    }

    #[test]
    fn spectrum_holds_true_coefficients() {
        let g = GridSpec::new(1, 16, 3.0).unwrap();
        let k = -3;
        let xi = PI * k as f64 / g.l;
        let u = ComplexField::from_fn(g, |x| Complex64::from_polar(2.0, xi * x[0]));
        let idx = g.slot(k);
        assert!((u.spectrum()[idx] - c(2.0, 0.0)).norm() < 1e-13);
        let back = ComplexField::from_spectrum(g, u.spectrum().to_vec()).unwrap();
        for (a, b) in back.values().iter().zip(u.values()) {
            assert!((a - b).norm() < 1e-13);
        }
    }

    #[test]
    fn parseval_both_dimensions() {
        for d in [1, 2] {
            let g = GridSpec::new(d, 32, 4.0).unwrap();
            let u = bump(g);
            let phys = u.l2_norm_physical();
            let spec = sobolev_norm(&u, SobolevIndex::L2);
            assert!((phys - spec).abs() < 1e-12 * phys);
        }
    }

    #[test]
    fn single_mode_sobolev_norm() {
        for d in [1, 2] {
            let g = GridSpec::new(d, 16, 2.0).unwrap();
            let idx = g.flatten([g.slot(2), if d == 2 { g.slot(-1) } else { 0 }]);
            let a = c(0.5, -1.5);
            let u = ComplexField::plane_wave(g, idx, a);
            for s in [0.0, 1.0, 2.4] {
                let expect = a.norm() * g.volume().sqrt() * (1.0 + g.xi_sq(idx)).powf(s / 2.0);
                let got = sobolev_norm(&u, SobolevIndex(s));
                assert!((got - expect).abs() < 1e-12 * expect);
            }
        }
    }

    #[test]
    fn inner_product_cases() {
        let g = GridSpec::new(1, 16, 1.0).unwrap();
        let u = bump(g);
        let uu = l2_inner(&u, &u).unwrap();
        assert!((uu - mass(&u)).abs() < 1e-12 * uu);
        assert!(l2_inner(&u, &u.scale(c(0.0, 1.0))).unwrap().abs() < 1e-14);
        let a = ComplexField::plane_wave(g, g.slot(1), c(1.0, 0.0));
        let b = ComplexField::plane_wave(g, g.slot(3), c(1.0, 0.0));
        let phys: f64 = a
            .values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| (x * y.conj()).re)
            .sum::<f64>();
        assert!(phys.abs() < 1e-12);
        assert!(l2_inner(&a, &b).unwrap().abs() < 1e-14);
        let other = GridSpec::new(1, 32, 1.0).unwrap();
        assert!(l2_inner(&a, &ComplexField::zeros(other)).is_err());
    }

    #[test]
    fn group_sign_and_isometry() {
        let g = GridSpec::new(1, 16, PI).unwrap();
        let u = ComplexField::plane_wave(g, g.slot(1), c(1.0, 0.0));
        let v = apply_group(&u, PI);
        for (a, b) in v.values().iter().zip(u.values()) {
            assert!((a + b).norm() < 1e-13);
        }
        let w = bump(g);
        for s in [0.0, 1.0, 1.6] {
            let n0 = sobolev_norm(&w, SobolevIndex(s));
            let n1 = sobolev_norm(&apply_group(&w, 0.37), SobolevIndex(s));
            assert!((n1 - n0).abs() < 1e-12 * n0);
        }
        let ts = apply_group(&apply_group(&w, 0.2), 0.5);
        let direct = apply_group(&w, 0.7);
        assert!(ts.sub(&direct).unwrap().l2_norm_physical() < 1e-12 * w.l2_norm_physical());
    }

    #[test]
    fn group_deviation_respects_bound() {
        let g = GridSpec::new(2, 32, 8.0).unwrap();
        assert_eq!(group_deviation_norm(&g, 0.5, 0.0).unwrap(), 0.0);
        for i in 0..10 {
            let t = 0.01 * 100f64.powf(i as f64 / 9.0);
            let v = group_deviation_norm(&g, 0.5, t).unwrap();
            assert!(v <= group_deviation_bound(0.5, t));
            assert!(group_deviation_norm(&g, 0.0, t).unwrap() <= 2.0);
        }
        assert!(group_deviation_norm(&g, 1.0, 0.1).is_err());
    }

    #[test]
    fn mass_and_hamiltonian_closed_forms() {
        let nl = NonlinearitySpec::kerr(1.0, 1.5).unwrap();
        for d in [1, 2] {
            let g = GridSpec::new(d, 16, 2.5).unwrap();
            let z = ComplexField::zeros(g);
            assert_eq!((mass(&z), hamiltonian(&z, &nl)), (0.0, 0.0));
            let a = c(0.6, 0.8 * 1.1);
            let u = ComplexField::from_fn(g, |_| a);
            let vol = g.volume();
            assert!((mass(&u) - a.norm_sqr() * vol).abs() < 1e-12 * vol);
            let h = -nl.lambda * a.norm().powf(2.0 * nl.sigma + 2.0) * vol / (2.0 * nl.sigma + 2.0);
            assert!((hamiltonian(&u, &nl) - h).abs() < 1e-12 * h.abs());
            let pw = ComplexField::plane_wave(g, g.slot(3), a);
            assert!((mass(&pw) - a.norm_sqr() * vol).abs() < 1e-12 * vol);
        }
    }

    #[test]
    fn csv_round_trip() {
        let g = GridSpec::new(2, 8, 1.0).unwrap();
        let u = bump(g);
        let text = u.to_csv();
        assert!(text.starts_with("i,j,x,y,re,im\n"));
        let back = ComplexField::from_csv(g, &text).unwrap();
        assert_eq!(back.values(), u.values());
    }
}
