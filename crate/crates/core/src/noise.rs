//! Spatially correlated fractional noise, its stochastic convolution, the
//! operators `L` and `Q = L L^*`, and the Gaussian rate function.
//!
//! The correlation operator is diagonal in the Fourier basis, so each active
//! mode `j` is a scalar Volterra problem driven by a complex fractional
//! Brownian motion `beta_1 + i beta_2`:
//!
//! ```text
//! Z_j(t) = phi_j int_0^t F_{j,t}(s) dB_j(s),   F_{j,t} = K_t^* [r -> e^{i w_j (t - r)}]
//! ```
//!
//! with `w_j = |xi_j|^2`. Covariances are reported in the real-Hilbert-space
//! convention `Q_j(t, u) = phi_j^2 int F_{j,t} conj(F_{j,u}) = E[Z_j(t) conj Z_j(u)] / 2`.

use std::cell::RefCell;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta;

use crate::control::Control;
use crate::error::{Error, Result};
use crate::fbm::{CholeskySampler, CirculantSampler, FbmSampler, TimeGrid};
use crate::field::{ComplexField, GridSpec, SobolevIndex};
use crate::io::{write_atomic, write_json};
use crate::kernel::{kt_star_group, HurstKernel};
use crate::parallel::map_indices;
use crate::quad::{GaussKronrod, TanhSinh};
use crate::rng::{standard_normal, StreamRng, Streams};

/// Relative residual above which a target counts as unreachable.
pub const RATE_INFEASIBLE_TOL: f64 = 1e-6;

/// Sub-cells per time step used by the convolution sampler.
pub const DEFAULT_SUBSTEPS: usize = 8;

/// Ratio of the outermost spectral shell to the full Hilbert-Schmidt sum
/// above which the truncated sum is not considered converged.
pub const TAIL_RATIO_MAX: f64 = 1e-3;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// The admissible window for `alpha` given `H`:
/// `(1/2 - H) 1_{H<1/2} < alpha < (1 - H) 1_{H<1/2} + 1_{H>=1/2}`.
pub fn alpha_window(hurst: f64) -> (f64, f64) {
    if hurst < 0.5 {
        (0.5 - hurst, 1.0 - hurst)
    } else {
        (0.0, 1.0)
    }
}

pub fn check_alpha_window(hurst: f64, alpha: f64) -> Result<()> {
    let (lo, hi) = alpha_window(hurst);
    if alpha > lo && alpha < hi {
        return Ok(());
    }
    let which = if alpha <= lo {
        if hurst < 0.5 {
            format!("alpha <= 1/2 - H = {lo}")
        } else {
            format!("alpha <= {lo}")
        }
    } else {
        format!("alpha >= {hi}")
    };
    Err(Error::domain(format!(
        "alpha={alpha} outside the window (1/2 - H) 1{{H<1/2}} < alpha < (1 - H) 1{{H<1/2}} + 1{{H>=1/2}} \
         for H={hurst}: {which}"
    )))
}

/// Smallest admissible decay exponent is strictly above this value.
pub fn decay_threshold(hurst: f64, alpha: f64, d: usize) -> f64 {
    1.0 + 2.0 * (hurst + alpha) + d as f64 / 2.0
}

/// Fourier multipliers `phi_j` of the correlation operator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSpec {
    pub grid: GridSpec,
    pub hurst: f64,
    pub alpha: f64,
    pub r: f64,
    /// `phi_j`, indexed by spectral flat index.
    pub eigenvalues: Vec<f64>,
    /// `(sum_j phi_j^2 (1 + |xi_j|^2)^{1 + 2(H + alpha)})^{1/2}`.
    pub hs_norm: f64,
    /// Outermost-shell share of the squared Hilbert-Schmidt sum.
    pub tail_ratio: f64,
    /// `H > 1/2` and `sum phi_j^2 (1 + |xi_j|^2)^2` finite on the grid.
    pub kerr_admissible: bool,
}

/// One active Fourier mode of the noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    /// Spectral flat index in the field grid.
    pub index: usize,
    /// `|xi|^2`, the group frequency.
    pub omega: f64,
    pub phi: f64,
}

pub fn build_correlation(grid: GridSpec, r: f64, hurst: f64, alpha: f64) -> Result<CorrelationSpec> {
    grid.validate()?;
    HurstKernel::new(hurst)?;
    check_alpha_window(hurst, alpha)?;
    let bound = decay_threshold(hurst, alpha, grid.d);
    if !(r > bound) {
        return Err(Error::domain(format!(
            "r={r} too small: need r > 1 + 2(H + alpha) + d/2 = {bound}"
        )));
    }
    let eigenvalues = (0..grid.len())
        .map(|i| (1.0 + grid.xi_sq(i)).powf(-r / 2.0))
        .collect();
    let spec = CorrelationSpec::from_eigenvalues(grid, hurst, alpha, r, eigenvalues);
    if spec.tail_ratio >= TAIL_RATIO_MAX {
        return Err(Error::domain(format!(
            "Hilbert-Schmidt sum not converged at the grid cutoff: tail ratio {:.3e} >= {TAIL_RATIO_MAX:e} \
             (increase r or N, or decrease L)",
            spec.tail_ratio
        )));
    }
    Ok(spec)
}

impl CorrelationSpec {
    fn from_eigenvalues(grid: GridSpec, hurst: f64, alpha: f64, r: f64, eigenvalues: Vec<f64>) -> Self {
        let e = 1.0 + 2.0 * (hurst + alpha);
        let outer = (grid.n / 2) as i64 - 1;
        let (mut total, mut shell, mut kerr) = (0.0, 0.0, 0.0);
        for (i, &phi) in eigenvalues.iter().enumerate() {
            let x2 = grid.xi_sq(i);
            let term = phi * phi * (1.0 + x2).powf(e);
            total += term;
            kerr += phi * phi * (1.0 + x2).powi(2);
            let s = grid.unflatten(i);
            let kmax = (0..grid.d).map(|a| grid.wavenumber(s[a]).abs()).max().unwrap_or(0);
            if kmax >= outer {
                shell += term;
            }
        }
        Self {
            grid,
            hurst,
            alpha,
            r,
            eigenvalues,
            hs_norm: total.sqrt(),
            tail_ratio: if total > 0.0 { shell / total } else { 0.0 },
            kerr_admissible: hurst > 0.5 && kerr.is_finite(),
        }
    }

    /// All `phi_j = 0`.
    pub fn zero(grid: GridSpec, hurst: f64, alpha: f64) -> Self {
        Self::from_eigenvalues(grid, hurst, alpha, f64::INFINITY, vec![0.0; grid.len()])
    }

    /// Keep only the `m` lowest-frequency modes.
    pub fn truncated(&self, m: usize) -> Self {
        let mut eig = vec![0.0; self.grid.len()];
        for &i in self.grid.modes_by_frequency().iter().take(m) {
            eig[i] = self.eigenvalues[i];
        }
        Self::from_eigenvalues(self.grid, self.hurst, self.alpha, self.r, eig)
    }

    /// Modes with `phi_j > 0`, lowest frequency first.
    pub fn active_modes(&self) -> Vec<Mode> {
        self.grid
            .modes_by_frequency()
            .into_iter()
            .filter(|&i| self.eigenvalues[i] > 0.0)
            .map(|i| Mode {
                index: i,
                omega: self.grid.xi_sq(i),
                phi: self.eigenvalues[i],
            })
            .collect()
    }
}

/// `F_{t}(s) = (K_t^* e^{i w (t - .)})(s)` with `gap = t - s`.
fn kernel_transfer(kernel: &HurstKernel, omega: f64, s: f64, gap: f64) -> Result<Complex64> {
    kt_star_group(kernel, omega, s, gap)
}

/// `int_a^b F_t(s) ds`; `t - b` is passed separately so the gap stays exact at `b = t`.
fn cell_integral(kernel: &HurstKernel, omega: f64, a: f64, b: f64, t_minus_b: f64) -> Result<Complex64> {
    let failure: RefCell<Option<Error>> = RefCell::new(None);
    let est = TanhSinh::with_tol(1e-10).integrate(b - a, |dl: f64, dr: f64| {
        match kernel_transfer(kernel, omega, a + dl, t_minus_b + dr) {
            Ok(v) => v,
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                ZERO
            }
        }
    });
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    if !(est.value.re.is_finite() && est.value.im.is_finite()) {
        return Err(Error::Quadrature {
            error: est.error,
            context: String::new(),
        });
    }
    Ok(est.value)
}

fn mode_error(mode: usize, e: Error) -> Error {
    match e {
        Error::Quadrature { error, context } => Error::Quadrature {
            error,
            context: format!(" for mode {mode}{context}"),
        },
        other => Error::domain(format!("mode {mode}: {other}")),
    }
}

/// Per-mode matrices of `L` on a refined time grid.
///
/// Row `k - 1` of `cells[i]` holds `phi int_{cell m} F_{t_k}(s) ds` for the
/// `n * substeps` sub-cells; entries with `m >= k * substeps` are zero
/// (causality).
#[derive(Clone, Debug)]
pub struct DiscreteLOperator {
    pub grid: GridSpec,
    pub timegrid: TimeGrid,
    pub kernel: HurstKernel,
    pub substeps: usize,
    pub modes: Vec<Mode>,
    pub cells: Vec<DMatrix<Complex64>>,
}

pub fn build_l(spec: &CorrelationSpec, kernel: &HurstKernel, tg: &TimeGrid) -> Result<DiscreteLOperator> {
    build_l_refined(spec, kernel, tg, 1)
}

pub fn build_l_refined(
    spec: &CorrelationSpec,
    kernel: &HurstKernel,
    tg: &TimeGrid,
    substeps: usize,
) -> Result<DiscreteLOperator> {
    if (spec.hurst - kernel.hurst()).abs() > 0.0 {
        return Err(Error::domain("kernel and correlation spec disagree on H"));
    }
    let substeps = substeps.max(1);
    let modes = spec.active_modes();
    let n = tg.steps();
    let fine = tg.refined(substeps);
    let nf = fine.steps();
    // One task per (mode, row).
    let rows = map_indices(modes.len() * n, |task| -> Result<Vec<Complex64>> {
        let mode = modes[task / n];
        let k = task % n + 1;
        let t = tg.point(k);
        let mut row = vec![ZERO; nf];
        for (m, slot) in row.iter_mut().enumerate().take(k * substeps) {
            let (a, b) = (fine.point(m), fine.point(m + 1));
            let t_minus_b = if m + 1 == k * substeps { 0.0 } else { t - b };
            *slot = mode.phi
                * cell_integral(kernel, mode.omega, a, b, t_minus_b).map_err(|e| mode_error(mode.index, e))?;
        }
        Ok(row)
    });
    let mut cells = Vec::with_capacity(modes.len());
    let mut rows = rows.into_iter();
    for _ in &modes {
        let mut mat = DMatrix::from_element(n, nf, ZERO);
        for k in 0..n {
            let row = rows.next().expect("one row per task")?;
            for (m, v) in row.into_iter().enumerate() {
                mat[(k, m)] = v;
            }
        }
        cells.push(mat);
    }
    Ok(DiscreteLOperator {
        grid: spec.grid,
        timegrid: *tg,
        kernel: *kernel,
        substeps,
        modes,
        cells,
    })
}

/// Per-mode time series `values[i][k]` at `t_0..=t_n` (the first entry is zero).
pub type ModeSeries = Vec<Vec<Complex64>>;

impl DiscreteLOperator {
    pub fn mode_indices(&self) -> Vec<usize> {
        self.modes.iter().map(|m| m.index).collect()
    }

    /// `n x n` matrix acting on controls that are constant on each time step.
    pub fn coarse(&self, i: usize) -> DMatrix<Complex64> {
        let n = self.timegrid.steps();
        let c = &self.cells[i];
        DMatrix::from_fn(n, n, |k, col| {
            (0..self.substeps).map(|q| c[(k, col * self.substeps + q)]).sum()
        })
    }

    /// `(L h)(t_k)` per mode.
    pub fn apply(&self, h: &Control) -> Result<ModeSeries> {
        if h.grid != self.timegrid {
            return Err(Error::GridMismatch);
        }
        let n = self.timegrid.steps();
        let mut out = Vec::with_capacity(self.modes.len());
        for (i, mode) in self.modes.iter().enumerate() {
            let mut series = vec![ZERO; n + 1];
            if let Some(pos) = h.modes.iter().position(|&m| m == mode.index) {
                let a = self.coarse(i);
                let v = &a * DVector::from_column_slice(&h.values[pos]);
                series[1..].copy_from_slice(v.as_slice());
            }
            out.push(series);
        }
        Ok(out)
    }

    /// `L h` as a field path.
    pub fn apply_path(&self, h: &Control) -> Result<ConvolutionPath> {
        let series = self.apply(h)?;
        Ok(ConvolutionPath::from_modes(
            self.grid,
            self.timegrid,
            self.kernel.hurst(),
            0,
            &self.mode_indices(),
            &series,
        ))
    }

    /// One draw of every active mode from `rng`: the sub-cell Brownian
    /// increments are shared by all evaluation times.
    pub fn sample_modes(&self, rng: &mut StreamRng) -> ModeSeries {
        let n = self.timegrid.steps();
        let nf = n * self.substeps;
        let scale = 1.0 / self.timegrid.refined(self.substeps).dt().sqrt();
        let mut xi = vec![ZERO; nf];
        self.cells
            .iter()
            .map(|c| {
                for x in xi.iter_mut() {
                    let re = standard_normal(rng);
                    let im = standard_normal(rng);
                    *x = Complex64::new(re, im);
                }
                let mut series = vec![ZERO; n + 1];
                for k in 0..n {
                    let lim = (k + 1) * self.substeps;
                    let mut acc = ZERO;
                    for m in 0..lim {
                        acc += c[(k, m)] * xi[m];
                    }
                    series[k + 1] = acc * scale;
                }
                series
            })
            .collect()
    }

    /// `replicates` independent draws; replicate `i` uses stream `(seed, "convolution", i)`.
    pub fn sample_replicates(&self, replicates: usize, seed: u64) -> Vec<ModeSeries> {
        let streams = Streams::new(seed).derive("convolution");
        map_indices(replicates, |i| self.sample_modes(&mut streams.rng(i as u64)))
    }

    pub fn to_path(&self, series: &ModeSeries, seed: u64) -> ConvolutionPath {
        ConvolutionPath::from_modes(
            self.grid,
            self.timegrid,
            self.kernel.hurst(),
            seed,
            &self.mode_indices(),
            series,
        )
    }

    /// Covariance of the sampler itself: `sum_m cells conj(cells) / ds`.
    pub fn sampler_covariance(&self, i: usize) -> DMatrix<Complex64> {
        let ds = self.timegrid.refined(self.substeps).dt();
        let c = &self.cells[i];
        (c * c.adjoint()) / Complex64::new(ds, 0.0)
    }

    /// `L L^*` in continuous time: `phi^2 int_0^{t ^ u} F_t(s) conj F_u(s) ds`
    /// per mode on `t_1..t_n`, by outer tanh-sinh over `s`.
    pub fn gram(&self) -> Result<Vec<DMatrix<Complex64>>> {
        let n = self.timegrid.steps();
        let kernel = self.kernel;
        let tg = self.timegrid;
        let pairs: Vec<(usize, usize, usize)> = (0..self.modes.len())
            .flat_map(|i| (0..n).flat_map(move |k| (0..=k).map(move |l| (i, k, l))))
            .collect();
        let values = map_indices(pairs.len(), |p| -> Result<Complex64> {
            let (i, k, l) = pairs[p];
            let mode = self.modes[i];
            let (t, u) = (tg.point(k + 1), tg.point(l + 1));
            let failure: RefCell<Option<Error>> = RefCell::new(None);
            // u <= t; dr is the distance to u.
            let est = TanhSinh::with_tol(1e-12).integrate(u, |dl: f64, dr: f64| {
                let ft = kernel_transfer(&kernel, mode.omega, dl, (t - u) + dr);
                let fu = kernel_transfer(&kernel, mode.omega, dl, dr);
                match (ft, fu) {
                    (Ok(a), Ok(b)) => a * b.conj(),
                    (Err(e), _) | (_, Err(e)) => {
                        failure.borrow_mut().get_or_insert(e);
                        ZERO
                    }
                }
            });
            if let Some(e) = failure.into_inner() {
                return Err(mode_error(mode.index, e));
            }
            Ok(est.value * (mode.phi * mode.phi))
        });
        assemble_hermitian(self.modes.len(), n, &pairs, values)
    }
}

fn assemble_hermitian(
    blocks: usize,
    n: usize,
    pairs: &[(usize, usize, usize)],
    values: Vec<Result<Complex64>>,
) -> Result<Vec<DMatrix<Complex64>>> {
    let mut out = vec![DMatrix::from_element(n, n, ZERO); blocks];
    for (&(i, k, l), v) in pairs.iter().zip(values) {
        let v = v?;
        out[i][(k, l)] = v;
        out[i][(l, k)] = v.conj();
    }
    Ok(out)
}

/// `Q` assembled directly from the covariance of the fractional stochastic
/// integral, `H (2H - 1) int int e^{i w (t - v)} e^{-i w (u - v')} |v - v'|^{2H - 2}`,
/// with the constant written as `c_H^2 (H - 1/2)^2 B(2 - 2H, H - 1/2)`.
/// Available for `H >= 1/2`.
pub fn build_q(spec: &CorrelationSpec, kernel: &HurstKernel, tg: &TimeGrid) -> Result<Vec<DMatrix<Complex64>>> {
    let h = kernel.hurst();
    if h < 0.5 {
        return Err(Error::domain("direct covariance assembly needs H >= 1/2"));
    }
    let modes = spec.active_modes();
    let n = tg.steps();
    let pairs: Vec<(usize, usize, usize)> = (0..modes.len())
        .flat_map(|i| (0..n).flat_map(move |k| (0..=k).map(move |l| (i, k, l))))
        .collect();
    let values = map_indices(pairs.len(), |p| -> Result<Complex64> {
        let (i, k, l) = pairs[p];
        let mode = modes[i];
        let (t, u) = (tg.point(k + 1), tg.point(l + 1));
        Ok(direct_covariance(kernel, mode.omega, t, u)? * (mode.phi * mode.phi))
    });
    assemble_hermitian(modes.len(), n, &pairs, values)
}

/// Per-mode `Q(t, u) / phi^2` from the double-integral representation.
pub fn direct_covariance(kernel: &HurstKernel, omega: f64, t: f64, u: f64) -> Result<Complex64> {
    let h = kernel.hurst();
    if kernel.is_brownian() {
        return Ok(Complex64::from_polar(t.min(u), omega * (t - u)));
    }
    let c = kernel.c_h();
    let constant = c * c * (h - 0.5).powi(2) * beta(2.0 - 2.0 * h, h - 0.5);
    let e = 2.0 * h - 1.0;
    let p = 1.0 / e;
    let gk = GaussKronrod::with_tol(1e-13);
    let inner = |v: f64| -> Complex64 {
        // int_0^u e^{i w v'} |v - v'|^{2H-2} dv' with x = |v - v'|^{2H-1}.
        let mut acc = ZERO;
        let left_hi = v.powf(e);
        let left_lo = if v > u { (v - u).powf(e) } else { 0.0 };
        if left_hi > left_lo {
            acc += gk
                .integrate(left_lo, left_hi, |x: f64| Complex64::from_polar(p, omega * (v - x.powf(p))))
                .value;
        }
        if v < u {
            let right_hi = (u - v).powf(e);
            acc += gk
                .integrate(0.0, right_hi, |x: f64| Complex64::from_polar(p, omega * (v + x.powf(p))))
                .value;
        }
        acc
    };
    let outer = |a: f64, b: f64| -> Result<Complex64> {
        TanhSinh::with_tol(1e-12)
            .integrate_interval(a, b, |v: f64| Complex64::from_polar(1.0, omega * (t - v)) * inner(v))
            .require("direct covariance outer integral")
    };
    let mut total = outer(0.0, t.min(u))?;
    if t > u {
        total += outer(u, t)?;
    }
    Ok(total * Complex64::from_polar(constant, -omega * u))
}

/// Largest elementwise `|Q - L L^*|` over all mode blocks.
pub fn verify_factorization(q: &[DMatrix<Complex64>], l: &DiscreteLOperator) -> Result<f64> {
    let ll = l.gram()?;
    if ll.len() != q.len() {
        return Err(Error::GridMismatch);
    }
    Ok(q.iter()
        .zip(&ll)
        .map(|(a, b)| (a - b).iter().map(|c| c.norm()).fold(0.0, f64::max))
        .fold(0.0, f64::max))
}

/// Real covariance of `(Re Z_j(t_k), Im Z_j(t_k))`, stacked mode by mode as
/// `[Re t_1..t_n, Im t_1..t_n]`, from complex blocks `Q_j`.
pub fn real_covariance(blocks: &[DMatrix<Complex64>]) -> DMatrix<f64> {
    let n = blocks.first().map_or(0, |b| b.nrows());
    let dim = 2 * n * blocks.len();
    let mut out = DMatrix::zeros(dim, dim);
    for (i, q) in blocks.iter().enumerate() {
        let o = 2 * n * i;
        for k in 0..n {
            for l in 0..n {
                let c = q[(k, l)];
                out[(o + k, o + l)] = c.re;
                out[(o + n + k, o + n + l)] = c.re;
                out[(o + k, o + n + l)] = -c.im;
                out[(o + n + k, o + l)] = c.im;
            }
        }
    }
    out
}

/// Flatten a draw in the layout of [`real_covariance`].
pub fn real_vector(series: &ModeSeries) -> Vec<f64> {
    let mut out = Vec::new();
    for s in series {
        out.extend(s[1..].iter().map(|c| c.re));
        out.extend(s[1..].iter().map(|c| c.im));
    }
    out
}

/// Sampled stochastic convolution on a time grid.
#[derive(Clone, Debug)]
pub struct ConvolutionPath {
    pub grid: GridSpec,
    pub timegrid: TimeGrid,
    pub hurst: f64,
    pub seed: u64,
    /// `Z(t_k)` for `k = 0..=n`.
    pub fields: Vec<ComplexField>,
}

#[derive(Serialize)]
struct PathManifest<'a, E: Serialize> {
    hurst: f64,
    seed: u64,
    grid: &'a GridSpec,
    timegrid: &'a TimeGrid,
    files: Vec<String>,
    #[serde(flatten)]
    extra: E,
}

impl ConvolutionPath {
    /// Field path `Z(t_k) = sum_j Z_j(t_k) e_j` with `e_j = e^{i xi_j x} / (2L)^{d/2}`.
    pub fn from_modes(
        grid: GridSpec,
        timegrid: TimeGrid,
        hurst: f64,
        seed: u64,
        modes: &[usize],
        series: &ModeSeries,
    ) -> Self {
        let norm = 1.0 / grid.volume().sqrt();
        let fields = (0..=timegrid.steps())
            .map(|k| {
                let mut spec = vec![ZERO; grid.len()];
                for (&idx, s) in modes.iter().zip(series) {
                    spec[idx] = s[k] * norm;
                }
                ComplexField::from_spectrum(grid, spec).expect("length matches grid")
            })
            .collect();
        Self {
            grid,
            timegrid,
            hurst,
            seed,
            fields,
        }
    }

    pub fn zero(grid: GridSpec, timegrid: TimeGrid, hurst: f64) -> Self {
        Self {
            grid,
            timegrid,
            hurst,
            seed: 0,
            fields: vec![ComplexField::zeros(grid); timegrid.steps() + 1],
        }
    }

    /// `Z_j(t_k)` for spectral index `idx`.
    pub fn mode_value(&self, k: usize, idx: usize) -> Complex64 {
        self.fields[k].spectrum()[idx] * self.grid.volume().sqrt()
    }

    /// One CSV per time step plus `manifest.json` with `extra` merged in.
    pub fn write_dir<E: Serialize>(&self, dir: &Path, extra: E) -> Result<()> {
        let mut files = Vec::new();
        for (k, f) in self.fields.iter().enumerate() {
            let name = format!("z_{k:05}.csv");
            write_atomic(&dir.join(&name), f.to_csv().as_bytes())?;
            files.push(name);
        }
        write_json(
            &dir.join("manifest.json"),
            &PathManifest {
                hurst: self.hurst,
                seed: self.seed,
                grid: &self.grid,
                timegrid: &self.timegrid,
                files,
                extra,
            },
        )
    }
}

/// Sample `Z` on `tg` with [`DEFAULT_SUBSTEPS`] Brownian sub-cells per step.
pub fn sample_convolution(
    spec: &CorrelationSpec,
    kernel: &HurstKernel,
    tg: &TimeGrid,
    seed: u64,
) -> Result<ConvolutionPath> {
    let op = build_l_refined(spec, kernel, tg, DEFAULT_SUBSTEPS)?;
    let series = op.sample_modes(&mut Streams::new(seed).derive("convolution").rng(0));
    Ok(op.to_path(&series, seed))
}

/// Long-path sampler: `Z(t_{k+1}) = e^{i w dt} Z(t_k) + phi e^{i w dt / 2} dB^H_k`,
/// exact for `w = 0` and first order in `w dt` otherwise. The fractional
/// increments come from the circulant sampler.
pub struct IncrementSampler {
    modes: Vec<Mode>,
    timegrid: TimeGrid,
    grid: GridSpec,
    hurst: f64,
    fbm: Box<dyn FbmSampler + Send>,
}

impl IncrementSampler {
    pub fn new(spec: &CorrelationSpec, tg: &TimeGrid) -> Result<Self> {
        let fbm: Box<dyn FbmSampler + Send> = match CirculantSampler::new(spec.hurst, tg)? {
            Some(c) => Box::new(c),
            None => Box::new(CholeskySampler::new(spec.hurst, tg)?),
        };
        Ok(Self {
            modes: spec.active_modes(),
            timegrid: *tg,
            grid: spec.grid,
            hurst: spec.hurst,
            fbm,
        })
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn sample_modes(&self, rng: &mut StreamRng) -> ModeSeries {
        let n = self.timegrid.steps();
        let dt = self.timegrid.dt();
        self.modes
            .iter()
            .map(|m| {
                let re = self.fbm.sample_increments(rng);
                let im = self.fbm.sample_increments(rng);
                let rot = Complex64::from_polar(1.0, m.omega * dt);
                let half = Complex64::from_polar(m.phi, 0.5 * m.omega * dt);
                let mut z = vec![ZERO; n + 1];
                for k in 0..n {
                    z[k + 1] = rot * z[k] + half * Complex64::new(re[k], im[k]);
                }
                z
            })
            .collect()
    }

    pub fn sample_path(&self, seed: u64, replicate: u64) -> ConvolutionPath {
        let series = self.sample_modes(&mut Streams::new(seed).derive("convolution-increments").rng(replicate));
        let idx: Vec<usize> = self.modes.iter().map(|m| m.index).collect();
        ConvolutionPath::from_modes(self.grid, self.timegrid, self.hurst, seed, &idx, &series)
    }
}

/// Result of a least-norm control search.
#[derive(Clone, Debug)]
pub struct RateResult {
    /// `1/2 |h*|^2`, or `+inf` when the target is unreachable.
    pub rate: f64,
    pub feasible: bool,
    pub control: Control,
    /// Relative residual `|L h* - f| / |f|`.
    pub residual: f64,
}

/// `1/2 min {|h|^2 : L h = f}` through per-mode pseudo-inverses.
pub fn gaussian_rate(l: &DiscreteLOperator, target: &ConvolutionPath) -> Result<RateResult> {
    if target.grid != l.grid || target.timegrid != l.timegrid {
        return Err(Error::GridMismatch);
    }
    let n = l.timegrid.steps();
    let sqrt_dt = l.timegrid.dt().sqrt();
    let total_sq: f64 = (0..l.grid.len())
        .map(|idx| (0..=n).map(|k| target.mode_value(k, idx).norm_sqr()).sum::<f64>())
        .sum();
    let mut control = Control::zero(l.timegrid, l.mode_indices());
    if total_sq == 0.0 {
        return Ok(RateResult {
            rate: 0.0,
            feasible: true,
            control,
            residual: 0.0,
        });
    }
    let mut resid_sq = 0.0;
    // Components no control can produce: inactive modes and the value at t_0.
    for idx in 0..l.grid.len() {
        let active = l.modes.iter().any(|m| m.index == idx);
        let last = if active { 0 } else { n };
        for k in 0..=last {
            resid_sq += target.mode_value(k, idx).norm_sqr();
        }
    }
    for (i, mode) in l.modes.iter().enumerate() {
        let a = l.coarse(i) / Complex64::new(sqrt_dt, 0.0);
        let f = DVector::from_fn(n, |k, _| target.mode_value(k + 1, mode.index));
        let svd = a.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let pinv = svd
            .pseudo_inverse(smax * 1e-13)
            .map_err(|e| Error::domain(format!("pseudo-inverse failed: {e}")))?;
        let g = &pinv * &f;
        resid_sq += (&a * &g - &f).norm_squared();
        control.values[i] = g.iter().map(|c| c / sqrt_dt).collect();
    }
    let residual = (resid_sq / total_sq).sqrt();
    let feasible = residual <= RATE_INFEASIBLE_TOL;
    Ok(RateResult {
        rate: if feasible { control.energy() } else { f64::INFINITY },
        feasible,
        control,
        residual,
    })
}

/// Cheapest way to put `Z(T)` on the sphere `|Z(T)|_{H^s} = delta`: the
/// rate `delta^2 / (2 max_j w_j |row_j|^2)` and its minimizing control.
pub fn terminal_ball_rate(l: &DiscreteLOperator, delta: f64, norm: SobolevIndex) -> Result<(f64, Control)> {
    let n = l.timegrid.steps();
    let sqrt_dt = l.timegrid.dt().sqrt();
    let mut best: Option<(usize, f64, DVector<Complex64>, f64)> = None;
    for (i, mode) in l.modes.iter().enumerate() {
        let a = l.coarse(i) / Complex64::new(sqrt_dt, 0.0);
        let row = a.row(n - 1).transpose();
        let w = norm.weight(mode.omega);
        let q = w * row.norm_squared();
        if best.as_ref().is_none_or(|b| q > b.1) {
            best = Some((i, q, row, w));
        }
    }
    let mut control = Control::zero(l.timegrid, l.mode_indices());
    let Some((i, q, row, w)) = best else {
        return Ok((if delta > 0.0 { f64::INFINITY } else { 0.0 }, control));
    };
    if q == 0.0 {
        return Ok((f64::INFINITY, control));
    }
    let rn = row.norm();
    let c = delta / (w.sqrt() * rn);
    control.values[i] = row.iter().map(|x| x.conj() * (c / rn / sqrt_dt)).collect();
    Ok((delta * delta / (2.0 * q), control))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::sobolev_norm;
    use crate::stats::{anderson_darling_normal, variance, AD_CRITICAL_1PCT};
    use std::f64::consts::PI;

    fn oracle_spec(hurst: f64, modes: usize) -> CorrelationSpec {
        let grid = GridSpec::new(1, 8, PI / 2.0).unwrap();
        build_correlation(grid, 8.0, hurst, 0.3).unwrap().truncated(modes)
    }

    #[test]
    fn window_and_decay_checks() {
        let g = GridSpec::new(1, 64, PI).unwrap();
        assert!(build_correlation(g, 4.0, 0.5, 0.3).is_ok());
        let err = build_correlation(g, 3.0, 0.5, 0.3).unwrap_err().to_string();
        assert!(err.contains("r > 1 + 2(H + alpha) + d/2"), "{err}");
        let err = build_correlation(g, 4.0, 0.3, 0.1).unwrap_err().to_string();
        assert!(err.contains("alpha <= 1/2 - H"), "{err}");
        assert!(check_alpha_window(0.3, 0.25).is_ok());
        assert!(check_alpha_window(0.3, 0.7).is_err());
        assert!(check_alpha_window(0.7, 0.99).is_ok());
        // A coarse grid with slow decay leaves too much mass in the last shell.
        let coarse = GridSpec::new(1, 8, PI).unwrap();
        assert!(build_correlation(coarse, 3.2, 0.5, 0.1).is_err());
    }

    #[test]
    fn truncation_keeps_lowest_modes() {
        let s = oracle_spec(0.7, 4);
        let m = s.active_modes();
        assert_eq!(m.len(), 4);
        assert_eq!(m[0].omega, 0.0);
        assert!(m.windows(2).all(|w| w[0].omega <= w[1].omega));
        assert!(s.hs_norm > 0.0 && s.hs_norm.is_finite());
    }

    #[test]
    fn zero_spec_gives_zero_path() {
        let grid = GridSpec::new(1, 8, 1.0).unwrap();
        let spec = CorrelationSpec::zero(grid, 0.7, 0.3);
        let k = HurstKernel::new(0.7).unwrap();
        let tg = TimeGrid::new(1.0, 4).unwrap();
        let z = sample_convolution(&spec, &k, &tg, 3).unwrap();
        assert!(z.fields.iter().all(|f| f.sup_norm() == 0.0));
        let q = build_q(&spec, &k, &tg).unwrap();
        assert!(q.is_empty());
    }

    #[test]
    fn brownian_zero_frequency_l_integrates() {
        let grid = GridSpec::new(1, 8, 1.0).unwrap();
        let mut spec = CorrelationSpec::zero(grid, 0.5, 0.3);
        spec.eigenvalues[0] = 1.0;
        let k = HurstKernel::new(0.5).unwrap();
        let tg = TimeGrid::new(1.0, 4).unwrap();
        let l = build_l(&spec, &k, &tg).unwrap();
        let h = Control::new(
            tg,
            vec![0],
            vec![vec![1.0, 2.0, -1.0, 0.5].into_iter().map(|x| Complex64::new(x, 0.0)).collect()],
        )
        .unwrap();
        let out = l.apply(&h).unwrap();
        let expect = [0.0, 0.25, 0.75, 0.5, 0.625];
        for (v, e) in out[0].iter().zip(expect) {
            assert!((v - Complex64::new(e, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn l_is_causal_and_linear() {
        let spec = oracle_spec(0.7, 3);
        let k = HurstKernel::new(0.7).unwrap();
        let tg = TimeGrid::new(1.0, 6).unwrap();
        let l = build_l(&spec, &k, &tg).unwrap();
        for i in 0..3 {
            let a = l.coarse(i);
            for r in 0..6 {
                for c in r + 1..6 {
                    assert_eq!(a[(r, c)], ZERO);
                }
            }
        }
        let modes = l.mode_indices();
        let mk = |s: f64| {
            Control::new(
                tg,
                modes.clone(),
                (0..3)
                    .map(|i| (0..6).map(|c| Complex64::new(s * (i + c) as f64, (c as f64).sin())).collect())
                    .collect(),
            )
            .unwrap()
        };
        let (h, g) = (mk(1.0), mk(-0.3));
        let lh = l.apply(&h).unwrap();
        let lg = l.apply(&g).unwrap();
        let mut comb = h.scaled(2.0);
        for (cv, gv) in comb.values.iter_mut().zip(&g.values) {
            for (a, b) in cv.iter_mut().zip(gv) {
                *a -= b * 0.5;
            }
        }
        let lc = l.apply(&comb).unwrap();
        for i in 0..3 {
            for kk in 0..=6 {
                let e = lh[i][kk] * 2.0 - lg[i][kk] * 0.5;
                assert!((lc[i][kk] - e).norm() < 1e-12 * (1.0 + e.norm()));
            }
        }
        let zero = l.apply(&Control::zero(tg, modes)).unwrap();
        assert!(zero.iter().flatten().all(|c| *c == ZERO));
    }

    #[test]
    fn direct_and_factorized_q_agree_small() {
        let spec = oracle_spec(0.7, 2);
        let k = HurstKernel::new(0.7).unwrap();
        let tg = TimeGrid::new(1.0, 3).unwrap();
        let q = build_q(&spec, &k, &tg).unwrap();
        let l = build_l(&spec, &k, &tg).unwrap();
        let r = verify_factorization(&q, &l).unwrap();
        assert!(r < 1e-10, "residual {r}");
        // Zero frequency: Q(t,t) = phi^2 t^{2H}.
        let q00 = q[0][(2, 2)].re;
        assert!((q00 - 1.0).abs() < 1e-10);
    }

    #[test]
    fn brownian_variance_per_component() {
        let grid = GridSpec::new(1, 8, PI).unwrap();
        let spec = build_correlation(grid, 6.0, 0.5, 0.3).unwrap().truncated(3);
        let k = HurstKernel::new(0.5).unwrap();
        let tg = TimeGrid::new(1.0, 4).unwrap();
        let l = build_l_refined(&spec, &k, &tg, 2).unwrap();
        let reps = l.sample_replicates(4000, 11);
        for (i, m) in l.modes.iter().enumerate() {
            let re: Vec<f64> = reps.iter().map(|r| r[i][4].re).collect();
            let target = m.phi * m.phi;
            let se = target * (2.0 / 3999.0f64).sqrt();
            assert!((variance(&re) - target).abs() < 4.0 * se);
        }
    }

    #[test]
    fn terminal_marginals_look_gaussian() {
        let spec = oracle_spec(0.7, 3);
        let k = HurstKernel::new(0.7).unwrap();
        let tg = TimeGrid::new(1.0, 4).unwrap();
        let l = build_l_refined(&spec, &k, &tg, 2).unwrap();
        let reps = l.sample_replicates(1000, 5);
        for i in 0..3 {
            let re: Vec<f64> = reps.iter().map(|r| r[i][4].re).collect();
            assert!(anderson_darling_normal(&re) < AD_CRITICAL_1PCT);
        }
    }

    #[test]
    fn rate_cases() {
        let spec = oracle_spec(0.7, 3);
        let k = HurstKernel::new(0.7).unwrap();
        let tg = TimeGrid::new(1.0, 5).unwrap();
        let l = build_l(&spec, &k, &tg).unwrap();
        let zero = ConvolutionPath::zero(spec.grid, tg, 0.7);
        let r0 = gaussian_rate(&l, &zero).unwrap();
        assert_eq!(r0.rate, 0.0);
        assert!(r0.control.is_zero());
        let h0 = Control::new(
            tg,
            l.mode_indices(),
            (0..3)
                .map(|i| (0..5).map(|c| Complex64::new((i * 5 + c) as f64 * 0.1, 0.2)).collect())
                .collect(),
        )
        .unwrap();
        let f = l.apply_path(&h0).unwrap();
        let r = gaussian_rate(&l, &f).unwrap();
        assert!(r.feasible);
        assert!(r.rate <= h0.energy() * (1.0 + 1e-9));
        // L is square and invertible here, so h0 is in the row space.
        assert!((r.rate - h0.energy()).abs() < 1e-8 * h0.energy());
        // A target on a mode without noise is unreachable.
        let mut spec_idx = vec![ZERO; spec.grid.len()];
        let dead = spec.grid.modes_by_frequency()[6];
        spec_idx[dead] = Complex64::new(1.0, 0.0);
        let mut bad = zero.clone();
        for fk in bad.fields.iter_mut().skip(1) {
            *fk = ComplexField::from_spectrum(spec.grid, spec_idx.clone()).unwrap();
        }
        let rb = gaussian_rate(&l, &bad).unwrap();
        assert!(!rb.feasible && rb.rate.is_infinite());
    }

    #[test]
    fn terminal_ball_control_hits_sphere() {
        let spec = oracle_spec(0.7, 4);
        let k = HurstKernel::new(0.7).unwrap();
        let tg = TimeGrid::new(1.0, 6).unwrap();
        let l = build_l(&spec, &k, &tg).unwrap();
        let (rate, h) = terminal_ball_rate(&l, 0.8, SobolevIndex::L2).unwrap();
        assert!((rate - h.energy()).abs() < 1e-12);
        let z = l.apply_path(&h).unwrap();
        let norm = sobolev_norm(&z.fields[6], SobolevIndex::L2);
        assert!((norm - 0.8).abs() < 1e-10);
        let (rate2, _) = terminal_ball_rate(&l, 1.6, SobolevIndex::L2).unwrap();
        assert!((rate2 - 4.0 * rate).abs() < 1e-12);
    }

    #[test]
    fn increment_sampler_brownian_variance() {
        let grid = GridSpec::new(1, 8, PI).unwrap();
        let spec = build_correlation(grid, 6.0, 0.5, 0.3).unwrap().truncated(1);
        let tg = TimeGrid::new(1.0, 16).unwrap();
        let s = IncrementSampler::new(&spec, &tg).unwrap();
        let streams = Streams::new(2).derive("t");
        let v: Vec<f64> = (0..3000).map(|i| s.sample_modes(&mut streams.rng(i))[0][16].re).collect();
        let se = (2.0 / 2999.0f64).sqrt();
        assert!((variance(&v) - 1.0).abs() < 4.0 * se);
    }
}
