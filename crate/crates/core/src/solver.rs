//! Strang-split mild solver with additive forcing and a cemetery state.
//!
//! One step from `t_k` to `t_{k+1}`:
//!
//! ```text
//! u <- N(dt/2) U(dt) N(dt/2) u - i sqrt(eps) (Z(t_{k+1}) - U(dt) Z(t_k))
//! ```
//!
//! where `N(tau) u = u exp(-i rho(|u|^2) tau)` solves `i u' = f(u)` exactly.

use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::control::Control;
use crate::error::{Error, Result};
use crate::fbm::TimeGrid;
use crate::field::{apply_group, hamiltonian, mass, sobolev_norm, ComplexField, SobolevIndex};
use crate::io::{fmt_f64, write_atomic, write_json};
use crate::noise::{ConvolutionPath, DiscreteLOperator};
use crate::nonlinearity::NonlinearitySpec;

/// Default blow-up threshold as a multiple of `|u_0|_{H^1}`.
pub const DEFAULT_BLOWUP_FACTOR: f64 = 1e3;

/// Default cap on the nonlinear phase `max rho(|u|^2) tau` of one substep.
pub const DEFAULT_SUBSTEP_TOLERANCE: f64 = 0.05;

/// Substeps allowed inside one output step before giving up on resolving it.
const MAX_SUBSTEPS: usize = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub timegrid: TimeGrid,
    /// Cap on `|u|_{H^1}`; exceeding it sends the trajectory to the cemetery.
    pub blowup_threshold: f64,
    /// Output steps whose nonlinear phase would exceed this are split into
    /// Strang substeps.
    pub substep_tolerance: f64,
}

impl SolverConfig {
    /// `dt` must divide `horizon` and `blowup_threshold` must exceed `|u_0|_{H^1}`.
    pub fn new(horizon: f64, dt: f64, blowup_threshold: f64, u0: &ComplexField) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::domain(format!("dt must be positive, got {dt}")));
        }
        let steps = (horizon / dt).round();
        if steps < 1.0 || ((steps * dt - horizon) / horizon).abs() > 1e-9 {
            return Err(Error::domain(format!("dt={dt} does not divide T={horizon}")));
        }
        let cfg = Self {
            timegrid: TimeGrid::new(horizon, steps as usize)?,
            blowup_threshold,
            substep_tolerance: DEFAULT_SUBSTEP_TOLERANCE,
        };
        cfg.check_initial(u0)?;
        Ok(cfg)
    }

    pub fn with_grid(timegrid: TimeGrid, blowup_threshold: f64, u0: &ComplexField) -> Result<Self> {
        let cfg = Self {
            timegrid,
            blowup_threshold,
            substep_tolerance: DEFAULT_SUBSTEP_TOLERANCE,
        };
        cfg.check_initial(u0)?;
        Ok(cfg)
    }

    pub fn with_substep_tolerance(self, tol: f64) -> Result<Self> {
        if !(tol > 0.0) {
            return Err(Error::domain(format!("substep tolerance must be positive, got {tol}")));
        }
        Ok(Self {
            substep_tolerance: tol,
            ..self
        })
    }

    fn check_initial(&self, u0: &ComplexField) -> Result<()> {
        let n0 = sobolev_norm(u0, SobolevIndex::H1);
        if !(self.blowup_threshold > n0) {
            return Err(Error::domain(format!(
                "blow-up threshold M={} must exceed |u0|_H1={n0}",
                self.blowup_threshold
            )));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.timegrid.dt()
    }
}

/// Per-step scalar diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub t: f64,
    pub mass: f64,
    pub h1: f64,
    pub hamiltonian: f64,
}

/// Solution on the time grid; after blow-up only the cemetery remains.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub timegrid: TimeGrid,
    pub epsilon: f64,
    /// `u(t_k)` for `k < cemetery_index` (all `n + 1` steps when no blow-up).
    fields: Vec<ComplexField>,
    diagnostics: Vec<StepDiagnostics>,
    cemetery_index: Option<usize>,
}

impl Trajectory {
    pub fn fields(&self) -> &[ComplexField] {
        &self.fields
    }

    pub fn diagnostics(&self) -> &[StepDiagnostics] {
        &self.diagnostics
    }

    /// First grid index in the cemetery.
    pub fn cemetery_index(&self) -> Option<usize> {
        self.cemetery_index
    }

    /// `inf {t_k : u(t_k) = cemetery}` with `inf of the empty set = +inf`.
    pub fn blowup_time(&self) -> f64 {
        self.cemetery_index
            .map_or(f64::INFINITY, |k| self.timegrid.point(k))
    }

    /// `u(t_k)`, or `None` in the cemetery.
    pub fn state(&self, k: usize) -> Option<&ComplexField> {
        self.fields.get(k)
    }

    pub fn terminal(&self) -> Option<&ComplexField> {
        self.state(self.timegrid.steps())
    }

    /// Diagnostics CSV `t,mass,h1,hamiltonian,cemetery`; cemetery rows carry
    /// no values.
    pub fn diagnostics_csv(&self) -> String {
        let mut out = String::from("t,mass,h1,hamiltonian,cemetery\n");
        for k in 0..=self.timegrid.steps() {
            let t = fmt_f64(self.timegrid.point(k));
            match self.diagnostics.get(k) {
                Some(d) => {
                    let _ = writeln!(
                        out,
                        "{t},{},{},{},0",
                        fmt_f64(d.mass),
                        fmt_f64(d.h1),
                        fmt_f64(d.hamiltonian)
                    );
                }
                None => {
                    let _ = writeln!(out, "{t},,,,1");
                }
            }
        }
        out
    }

    /// Diagnostics, every `snapshot_every`-th live field, and a manifest.
    pub fn write_dir<E: Serialize>(&self, dir: &Path, snapshot_every: Option<usize>, extra: E) -> Result<()> {
        write_atomic(&dir.join("diagnostics.csv"), self.diagnostics_csv().as_bytes())?;
        let mut snapshots = Vec::new();
        if let Some(every) = snapshot_every {
            for (k, f) in self.fields.iter().enumerate().step_by(every.max(1)) {
                let name = format!("u_{k:05}.csv");
                write_atomic(&dir.join(&name), f.to_csv().as_bytes())?;
                snapshots.push(name);
            }
        }
        #[derive(Serialize)]
        struct Manifest<'a, E: Serialize> {
            timegrid: &'a TimeGrid,
            epsilon: f64,
            blowup_time: Option<f64>,
            cemetery_index: Option<usize>,
            snapshots: Vec<String>,
            #[serde(flatten)]
            extra: E,
        }
        write_json(
            &dir.join("manifest.json"),
            &Manifest {
                timegrid: &self.timegrid,
                epsilon: self.epsilon,
                blowup_time: self.cemetery_index.map(|k| self.timegrid.point(k)),
                cemetery_index: self.cemetery_index,
                snapshots,
                extra,
            },
        )
    }
}

/// Pointwise `f(u)`; a non-finite value is reported as overflow.
pub fn evaluate_nonlinearity(nl: &NonlinearitySpec, u: &ComplexField) -> Result<ComplexField> {
    let out = u.map_values(|c| c * nl.rho(c.norm_sqr()));
    if out.is_finite() {
        Ok(out)
    } else {
        Err(Error::Overflow)
    }
}

/// Exact flow of `i u' = f(u)` for time `tau`.
fn nonlinear_flow(nl: &NonlinearitySpec, u: &ComplexField, tau: f64) -> ComplexField {
    if nl.is_linear() {
        return u.clone();
    }
    u.map_values(|c| c * Complex64::from_polar(1.0, -nl.rho(c.norm_sqr()) * tau))
}

/// `N(tau/2) U(tau) N(tau/2)` over `dt`, split so each substep rotates the
/// phase by at most `substep_tolerance`. `None` when the step cannot be
/// resolved or the norm cap is crossed inside it.
fn strang_step(nl: &NonlinearitySpec, u: &ComplexField, dt: f64, cfg: &SolverConfig) -> Option<ComplexField> {
    let max_rate = |w: &ComplexField| w.values().iter().map(|c| nl.rho(c.norm_sqr()).abs()).fold(0.0, f64::max);
    let step = |w: &ComplexField, tau: f64| {
        let v = nonlinear_flow(nl, w, 0.5 * tau);
        let v = apply_group(&v, tau);
        nonlinear_flow(nl, &v, 0.5 * tau)
    };
    let rate = max_rate(u);
    if !rate.is_finite() {
        return None;
    }
    if rate * dt <= cfg.substep_tolerance {
        return Some(step(u, dt));
    }
    let mut w = u.clone();
    let mut left = dt;
    let mut rate = rate;
    for _ in 0..MAX_SUBSTEPS {
        let tau = if rate * left <= cfg.substep_tolerance {
            left
        } else {
            cfg.substep_tolerance / rate
        };
        w = step(&w, tau);
        left -= tau;
        if left <= dt * 1e-14 {
            return Some(w);
        }
        if !(sobolev_norm(&w, SobolevIndex::H1) <= cfg.blowup_threshold) {
            return None;
        }
        rate = max_rate(&w);
        if !rate.is_finite() {
            return None;
        }
    }
    None
}

fn diagnose(u: &ComplexField, nl: &NonlinearitySpec, t: f64) -> StepDiagnostics {
    StepDiagnostics {
        t,
        mass: mass(u),
        h1: sobolev_norm(u, SobolevIndex::H1),
        hamiltonian: hamiltonian(u, nl),
    }
}

/// First index whose `H^1` norm exceeds `threshold` (or is not finite).
pub fn detect_blowup(fields: &[ComplexField], threshold: f64) -> Option<usize> {
    fields.iter().position(|u| {
        let n = sobolev_norm(u, SobolevIndex::H1);
        !(n <= threshold)
    })
}

/// Mild solution driven by `sqrt(eps) Z`.
pub fn solve_mild(
    u0: &ComplexField,
    nl: &NonlinearitySpec,
    forcing: &ConvolutionPath,
    eps: f64,
    cfg: &SolverConfig,
) -> Result<Trajectory> {
    if forcing.timegrid != cfg.timegrid || forcing.grid != *u0.grid() {
        return Err(Error::GridMismatch);
    }
    if !(eps >= 0.0) {
        return Err(Error::domain(format!("eps must be nonnegative, got {eps}")));
    }
    nl.validate()?;
    let n = cfg.timegrid.steps();
    let dt = cfg.dt();
    let amp = Complex64::new(0.0, -eps.sqrt());
    let forced = eps > 0.0 && forcing.fields.iter().any(|f| f.sup_norm() > 0.0);
    let mut fields = Vec::with_capacity(n + 1);
    let mut diagnostics = Vec::with_capacity(n + 1);
    fields.push(u0.clone());
    diagnostics.push(diagnose(u0, nl, 0.0));
    let mut cemetery_index = None;
    let mut u = u0.clone();
    for k in 0..n {
        let Some(mut v) = strang_step(nl, &u, dt, cfg) else {
            cemetery_index = Some(k + 1);
            break;
        };
        if forced {
            let d = forcing.fields[k + 1].sub(&apply_group(&forcing.fields[k], dt))?;
            v = v.axpy(amp, &d)?;
        }
        let diag = diagnose(&v, nl, cfg.timegrid.point(k + 1));
        if !(diag.h1 <= cfg.blowup_threshold) {
            cemetery_index = Some(k + 1);
            break;
        }
        fields.push(v.clone());
        diagnostics.push(diag);
        u = v;
    }
    Ok(Trajectory {
        timegrid: cfg.timegrid,
        epsilon: eps,
        fields,
        diagnostics,
        cemetery_index,
    })
}

/// Skeleton `S(u_0, h)`: the mild solver with `eps = 1` and forcing `L h`.
pub fn solve_skeleton(
    u0: &ComplexField,
    h: &Control,
    nl: &NonlinearitySpec,
    l: &DiscreteLOperator,
    cfg: &SolverConfig,
) -> Result<Trajectory> {
    let forcing = l.apply_path(h)?;
    solve_mild(u0, nl, &forcing, 1.0, cfg)
}

/// `sup_k |a(t_k) - b(t_k)|_{H^1}`; infinite if either trajectory is in the
/// cemetery at a time the other is not.
pub fn sup_h1_distance(a: &Trajectory, b: &Trajectory) -> f64 {
    let n = a.timegrid.steps();
    let mut worst: f64 = 0.0;
    for k in 0..=n {
        match (a.state(k), b.state(k)) {
            (Some(x), Some(y)) => {
                let d = x.sub(y).map_or(f64::INFINITY, |z| sobolev_norm(&z, SobolevIndex::H1));
                worst = worst.max(d);
            }
            (None, None) => {}
            _ => return f64::INFINITY,
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{l2_inner, GridSpec};
    use crate::kernel::HurstKernel;
    use crate::noise::{build_correlation, build_l};
    use std::f64::consts::PI;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn nonlinearity_cases() {
        let g = GridSpec::new(1, 16, 2.0).unwrap();
        let kerr = NonlinearitySpec::kerr(1.0, 1.0).unwrap();
        let z = evaluate_nonlinearity(&kerr, &ComplexField::zeros(g)).unwrap();
        assert_eq!(z.sup_norm(), 0.0);
        let one = ComplexField::from_fn(g, |_| c(1.0, 0.0));
        let f = evaluate_nonlinearity(&kerr, &one).unwrap();
        assert!(f.values().iter().all(|v| (v - c(1.0, 0.0)).norm() < 1e-15));
        // |kerr - saturated| <= kappa |u|^{4 sigma + 1}, which is 8e-6 at |u| = 2, sigma = 1/2.
        let kerr_half = NonlinearitySpec::kerr(1.0, 0.5).unwrap();
        let sat = NonlinearitySpec::saturated(1.0, 0.5, 1e-6).unwrap();
        let u = ComplexField::from_fn(g, |x| c(2.0 * (-x[0] * x[0]).exp(), 0.5 * x[0].sin()));
        assert!(u.sup_norm() <= 2.0);
        let a = evaluate_nonlinearity(&kerr_half, &u).unwrap();
        let b = evaluate_nonlinearity(&sat, &u).unwrap();
        assert!(a.sub(&b).unwrap().sup_norm() < 1e-5);
        let huge = ComplexField::from_fn(g, |_| c(1e200, 0.0));
        assert!(matches!(evaluate_nonlinearity(&kerr, &huge), Err(Error::Overflow)));
    }

    #[test]
    fn config_validation() {
        let g = GridSpec::new(1, 16, 2.0).unwrap();
        let u0 = ComplexField::from_fn(g, |x| c((-x[0] * x[0]).exp(), 0.0));
        assert!(SolverConfig::new(1.0, 0.3, 1e3, &u0).is_err());
        assert!(SolverConfig::new(1.0, 0.25, 1e3, &u0).is_ok());
        assert!(SolverConfig::new(1.0, 0.25, 1e-3, &u0).is_err());
    }

    #[test]
    fn linear_free_flow_is_exact() {
        let g = GridSpec::new(1, 32, PI).unwrap();
        let u0 = ComplexField::from_fn(g, |x| c((-x[0] * x[0]).exp(), 0.2 * x[0].cos()));
        let cfg = SolverConfig::new(1.0, 0.1, 1e6, &u0).unwrap();
        let zero = ConvolutionPath::zero(g, cfg.timegrid, 0.5);
        let traj = solve_mild(&u0, &NonlinearitySpec::linear(), &zero, 0.0, &cfg).unwrap();
        let exact = apply_group(&u0, 1.0);
        let err = traj.terminal().unwrap().sub(&exact).unwrap().l2_norm_physical();
        assert!(err < 1e-12);
        assert_eq!(traj.blowup_time(), f64::INFINITY);
    }

    #[test]
    fn flow_restart_reproduces_itself() {
        let g = GridSpec::new(1, 64, 8.0).unwrap();
        let nl = NonlinearitySpec::kerr(-1.0, 1.0).unwrap();
        let u0 = ComplexField::from_fn(g, |x| c((-x[0] * x[0]).exp(), 0.0));
        let cfg = SolverConfig::new(1.0, 0.01, 1e6, &u0).unwrap();
        let zero = ConvolutionPath::zero(g, cfg.timegrid, 0.5);
        let full = solve_mild(&u0, &nl, &zero, 0.0, &cfg).unwrap();
        let mid = full.state(40).unwrap();
        let cfg2 = SolverConfig::new(0.6, 0.01, 1e6, mid).unwrap();
        let rest = solve_mild(mid, &nl, &ConvolutionPath::zero(g, cfg2.timegrid, 0.5), 0.0, &cfg2).unwrap();
        let d = rest.terminal().unwrap().sub(full.terminal().unwrap()).unwrap();
        assert!(d.l2_norm_physical() < 1e-8);
    }

    #[test]
    fn linear_skeleton_is_minus_i_lh() {
        let grid = GridSpec::new(1, 8, PI / 2.0).unwrap();
        let spec = build_correlation(grid, 8.0, 0.7, 0.3).unwrap().truncated(3);
        let k = HurstKernel::new(0.7).unwrap();
        let tg = TimeGrid::new(1.0, 8).unwrap();
        let l = build_l(&spec, &k, &tg).unwrap();
        let h = Control::new(
            tg,
            l.mode_indices(),
            (0..3)
                .map(|i| (0..8).map(|cix| c((i + cix) as f64 * 0.1, -0.05 * cix as f64)).collect())
                .collect(),
        )
        .unwrap();
        let u0 = ComplexField::zeros(grid);
        let cfg = SolverConfig::with_grid(tg, 1e6, &u0).unwrap();
        let lin = NonlinearitySpec::linear();
        let s = solve_skeleton(&u0, &h, &lin, &l, &cfg).unwrap();
        let lh = l.apply_path(&h).unwrap();
        for kk in 0..=8 {
            let expect = lh.fields[kk].scale(c(0.0, -1.0));
            let d = s.state(kk).unwrap().sub(&expect).unwrap().l2_norm_physical();
            assert!(d < 1e-10, "step {kk}: {d}");
        }
        let s2 = solve_skeleton(&u0, &h.scaled(2.0), &lin, &l, &cfg).unwrap();
        let d = s2.terminal().unwrap().sub(&s.terminal().unwrap().scale(c(2.0, 0.0))).unwrap();
        assert!(d.l2_norm_physical() < 1e-12);
        // Zero control is the deterministic flow.
        let nl = NonlinearitySpec::kerr(1.0, 1.0).unwrap();
        let u1 = ComplexField::from_fn(grid, |x| c(0.5 * x[0].cos(), 0.0));
        let cfg1 = SolverConfig::with_grid(tg, 1e6, &u1).unwrap();
        let s0 = solve_skeleton(&u1, &Control::zero(tg, l.mode_indices()), &nl, &l, &cfg1).unwrap();
        let det = solve_mild(&u1, &nl, &ConvolutionPath::zero(grid, tg, 0.7), 0.0, &cfg1).unwrap();
        assert_eq!(s0.terminal().unwrap().values(), det.terminal().unwrap().values());
    }

    #[test]
    fn mass_is_conserved_by_phase_rotation() {
        let g = GridSpec::new(1, 64, 8.0).unwrap();
        let nl = NonlinearitySpec::kerr(1.0, 1.0).unwrap();
        let u0 = ComplexField::from_fn(g, |x| c((-x[0] * x[0]).exp(), 0.0));
        let v = nonlinear_flow(&nl, &u0, 0.3);
        assert!((mass(&v) - mass(&u0)).abs() < 1e-13 * mass(&u0));
        assert!(l2_inner(&v, &u0).unwrap() < mass(&u0));
    }

    #[test]
    fn cemetery_rows_have_no_values() {
        let g = GridSpec::new(1, 16, 2.0).unwrap();
        let u0 = ComplexField::from_fn(g, |x| c((-x[0] * x[0]).exp(), 0.0));
        let tg = TimeGrid::new(1.0, 4).unwrap();
        let threshold = sobolev_norm(&u0, SobolevIndex::H1) * 1.0001;
        let cfg = SolverConfig::with_grid(tg, threshold, &u0).unwrap();
        // A strong forcing pushes the H1 norm over the cap at once.
        let mut z = ConvolutionPath::zero(g, tg, 0.5);
        for f in z.fields.iter_mut().skip(1) {
            *f = u0.scale(c(5.0, 0.0));
        }
        let traj = solve_mild(&u0, &NonlinearitySpec::linear(), &z, 1.0, &cfg).unwrap();
        assert_eq!(traj.cemetery_index(), Some(1));
        assert_eq!(traj.blowup_time(), 0.25);
        assert!(traj.state(1).is_none());
        let csv = traj.diagnostics_csv();
        assert_eq!(csv.lines().filter(|l| l.ends_with(",,,,1")).count(), 4);
        assert_eq!(detect_blowup(traj.fields(), threshold), None);
    }
}
