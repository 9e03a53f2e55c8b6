//! Scalar fractional Brownian motion: covariance matrices and path samplers.
//!
//! The Cholesky sampler is the distributional reference. The circulant
//! (Davies-Harte) sampler draws the stationary increment sequence through an
//! FFT and is used for long paths; it falls back to Cholesky when the
//! circulant embedding is not nonnegative definite.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::kernel::{fbm_covariance, HurstKernel};
use crate::parallel::map_indices;
use crate::rng::{fill_standard_normal, standard_normal, StreamRng, Streams};

/// Eigenvalues above `-PSD_TOLERANCE` count as numerically nonnegative.
pub const PSD_TOLERANCE: f64 = 1e-10;

/// Uniform grid `t_k = k T / n`, `k = 0..=n`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::domain(format!("time horizon must be positive, got {horizon}")));
        }
        if steps < 1 {
            return Err(Error::domain("time grid needs at least one step"));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn point(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            self.horizon * k as f64 / self.steps as f64
        }
    }

    pub fn points(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.point(k)).collect()
    }

    /// Grid with `factor` times as many steps over the same horizon.
    pub fn refined(&self, factor: usize) -> Self {
        Self {
            horizon: self.horizon,
            steps: self.steps * factor.max(1),
        }
    }
}

/// Covariance of `(beta^H(t_1), ..., beta^H(t_n))`; `t_0 = 0` is excluded
/// because its row and column vanish.
pub fn build_covariance_matrix(hurst: f64, grid: &TimeGrid) -> Result<DMatrix<f64>> {
    let m = analytic_covariance(hurst, grid)?;
    let min_eigenvalue = m.symmetric_eigenvalues().min();
    if min_eigenvalue < -PSD_TOLERANCE {
        return Err(Error::Indefinite { min_eigenvalue });
    }
    Ok(m)
}

fn analytic_covariance(hurst: f64, grid: &TimeGrid) -> Result<DMatrix<f64>> {
    let n = grid.steps();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = fbm_covariance(hurst, grid.point(i + 1), grid.point(j + 1))?;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    Ok(m)
}

/// The same matrix reconstructed as `int_0^{t_i ^ t_j} K(t_i, r) K(t_j, r) dr`.
///
/// Every grid cell carries one fixed tanh-sinh rule shared by all rows, so
/// the matrix is `A A^T` with `A[i, q] = sqrt(w_q) K(t_i, r_q)`, and each
/// column of `A` comes from a single incremental kernel sweep.
pub fn kernel_covariance_matrix(kernel: &HurstKernel, grid: &TimeGrid) -> DMatrix<f64> {
    let n = grid.steps();
    let dt = grid.dt();
    let rule = fixed_tanh_sinh(dt);
    let q = rule.len();
    let columns = map_indices(n * q, |idx| {
        let (m, k) = (idx / q, idx % q);
        let (dl, dr, w) = rule[k];
        let r = grid.point(m) + dl;
        // Row i >= m + 1 sits at gap dr + (i - m - 1) dt from the node.
        let gaps: Vec<f64> = (0..n - m).map(|j| dr + j as f64 * dt).collect();
        let sw = w.sqrt();
        kernel.eval_column(r, &gaps).into_iter().map(|v| v * sw).collect::<Vec<f64>>()
    });
    let mut a = DMatrix::zeros(n, n * q);
    for (idx, col) in columns.iter().enumerate() {
        let m = idx / q;
        for (j, v) in col.iter().enumerate() {
            a[(m + j, idx)] = *v;
        }
    }
    &a * a.transpose()
}

/// Fixed-step tanh-sinh nodes on `[0, len]` as `(dl, dr, weight)`.
fn fixed_tanh_sinh(len: f64) -> Vec<(f64, f64, f64)> {
    const STEP: f64 = 0.125;
    const REACH: i32 = 28;
    let half_pi = std::f64::consts::FRAC_PI_2;
    (-REACH..=REACH)
        .map(|k| {
            let t = k as f64 * STEP;
            let y = half_pi * t.sinh();
            let e = (-2.0 * y.abs()).exp();
            let near = len * e / (1.0 + e);
            let far = len / (1.0 + e);
            let w = STEP * len * half_pi * t.cosh() * 2.0 * e / ((1.0 + e) * (1.0 + e));
            if y >= 0.0 {
                (far, near, w)
            } else {
                (near, far, w)
            }
        })
        .collect()
}

/// Replicate paths on a time grid; `values[r][k]` is replicate `r` at `t_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarPathSet {
    pub grid: TimeGrid,
    pub hurst: f64,
    pub seed: u64,
    pub values: Vec<Vec<f64>>,
}

impl ScalarPathSet {
    pub fn replicates(&self) -> usize {
        self.values.len()
    }

    /// Values of every replicate at grid index `k`.
    pub fn marginal(&self, k: usize) -> Vec<f64> {
        self.values.iter().map(|p| p[k]).collect()
    }

    /// `beta(t_k) - beta(t_j)` across replicates.
    pub fn increments(&self, k: usize, j: usize) -> Vec<f64> {
        self.values.iter().map(|p| p[k] - p[j]).collect()
    }

    /// Header `t_0,...,t_n`, then one row per replicate at 17 significant digits.
    pub fn to_csv(&self) -> String {
        let n = self.grid.steps();
        let mut out = String::with_capacity(self.values.len() * (n + 1) * 24);
        let header: Vec<String> = (0..=n).map(|k| format!("t_{k}")).collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for row in &self.values {
            for (k, v) in row.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{}", fmt_f64(*v));
            }
            out.push('\n');
        }
        out
    }
}

/// A sampler of scalar fBm paths on a fixed grid.
pub trait FbmSampler: Sync {
    fn grid(&self) -> &TimeGrid;
    fn hurst(&self) -> f64;

    /// Path values at `t_0..=t_n` (the first entry is zero).
    fn sample_path(&self, rng: &mut StreamRng) -> Vec<f64>;

    /// Increments `beta(t_{k+1}) - beta(t_k)`.
    fn sample_increments(&self, rng: &mut StreamRng) -> Vec<f64> {
        let p = self.sample_path(rng);
        p.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// `replicates` paths with replicate `i` drawn from stream `(seed, "fbm", i)`.
    fn sample_set(&self, replicates: usize, seed: u64) -> ScalarPathSet
    where
        Self: Sized,
    {
        let streams = Streams::new(seed).derive("fbm");
        let values = map_indices(replicates, |i| self.sample_path(&mut streams.rng(i as u64)));
        ScalarPathSet {
            grid: *self.grid(),
            hurst: self.hurst(),
            seed,
            values,
        }
    }
}

/// Cholesky factor of the covariance on `t_1..t_n`.
pub struct CholeskySampler {
    grid: TimeGrid,
    hurst: f64,
    factor: DMatrix<f64>,
}

impl CholeskySampler {
    pub fn new(hurst: f64, grid: &TimeGrid) -> Result<Self> {
        let cov = analytic_covariance(hurst, grid)?;
        let factor = match cov.clone().cholesky() {
            Some(c) => c.unpack(),
            None => {
                let min_eigenvalue = cov.symmetric_eigenvalues().min();
                return Err(Error::Indefinite { min_eigenvalue });
            }
        };
        Ok(Self {
            grid: *grid,
            hurst,
            factor,
        })
    }
}

impl FbmSampler for CholeskySampler {
    fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    fn hurst(&self) -> f64 {
        self.hurst
    }

    fn sample_path(&self, rng: &mut StreamRng) -> Vec<f64> {
        let n = self.grid.steps();
        let mut z = vec![0.0; n];
        fill_standard_normal(rng, &mut z);
        let x = &self.factor * DVector::from_vec(z);
        let mut out = Vec::with_capacity(n + 1);
        out.push(0.0);
        out.extend(x.iter());
        out
    }
}

/// Davies-Harte circulant embedding of fractional Gaussian noise.
pub struct CirculantSampler {
    grid: TimeGrid,
    hurst: f64,
    /// `sqrt(lambda_k / m)` for the `m = 2n` circulant eigenvalues.
    scale: Vec<f64>,
}

impl CirculantSampler {
    /// `None` when the embedding has a negative eigenvalue beyond tolerance.
    pub fn new(hurst: f64, grid: &TimeGrid) -> Result<Option<Self>> {
        HurstKernel::new(hurst)?;
        let n = grid.steps();
        let m = 2 * n;
        let step_var = grid.dt().powf(2.0 * hurst);
        let autocov = |k: usize| {
            let k = k as f64;
            let two_h = 2.0 * hurst;
            0.5 * step_var * ((k + 1.0).powf(two_h) - 2.0 * k.powf(two_h) + (k - 1.0).abs().powf(two_h))
        };
        let mut row: Vec<Complex64> = (0..m)
            .map(|k| Complex64::new(autocov(if k <= n { k } else { m - k }), 0.0))
            .collect();
        FftPlanner::new().plan_fft_forward(m).process(&mut row);
        let max = row.iter().map(|c| c.re).fold(0.0, f64::max);
        if row.iter().any(|c| c.re < -PSD_TOLERANCE * max.max(1.0)) {
            return Ok(None);
        }
        let scale = row.iter().map(|c| (c.re.max(0.0) / m as f64).sqrt()).collect();
        Ok(Some(Self {
            grid: *grid,
            hurst,
            scale,
        }))
    }
}

impl FbmSampler for CirculantSampler {
    fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    fn hurst(&self) -> f64 {
        self.hurst
    }

    fn sample_increments(&self, rng: &mut StreamRng) -> Vec<f64> {
        let n = self.grid.steps();
        let mut w: Vec<Complex64> = self
            .scale
            .iter()
            .map(|&s| Complex64::new(s * standard_normal(rng), s * standard_normal(rng)))
            .collect();
        FftPlanner::new().plan_fft_forward(w.len()).process(&mut w);
        w.iter().take(n).map(|c| c.re).collect()
    }

    fn sample_path(&self, rng: &mut StreamRng) -> Vec<f64> {
        let inc = self.sample_increments(rng);
        let mut out = Vec::with_capacity(inc.len() + 1);
        let mut acc = 0.0;
        out.push(0.0);
        for d in inc {
            acc += d;
            out.push(acc);
        }
        out
    }
}

pub fn sample_fbm_exact(hurst: f64, grid: &TimeGrid, replicates: usize, seed: u64) -> Result<ScalarPathSet> {
    if replicates == 0 {
        return Err(Error::domain("need at least one replicate"));
    }
    Ok(CholeskySampler::new(hurst, grid)?.sample_set(replicates, seed))
}

pub fn sample_fbm_fast(hurst: f64, grid: &TimeGrid, replicates: usize, seed: u64) -> Result<ScalarPathSet> {
    if replicates == 0 {
        return Err(Error::domain("need at least one replicate"));
    }
    match CirculantSampler::new(hurst, grid)? {
        Some(s) => Ok(s.sample_set(replicates, seed)),
        None => sample_fbm_exact(hurst, grid, replicates, seed),
    }
}
