//! Orchestration: one function per experiment kind, each writing its
//! artifacts under the output directory and returning post-run checks.
//!
//! Every run ends with `manifest.json` echoing the resolved configuration,
//! the artifact list and the check results. A failed check turns into
//! [`Error::Invariant`] after the manifest is written.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{ControlSource, ConvolutionMethod, ExperimentKind, FbmMethod, HolderTarget, RunConfig};
use crate::control::Control;
use crate::error::{Error, Result};
use crate::fbm::{sample_fbm_exact, sample_fbm_fast, CirculantSampler, CholeskySampler, FbmSampler};
use crate::field::{mass, ComplexField, SobolevIndex};
use crate::holder::{holder_exponent, holder_exponent_fields, HolderReport};
use crate::io::{fmt_f64, write_atomic, write_json};
use crate::kernel::HurstKernel;
use crate::ldp::{
    estimate_event_probability, ldp_slope, minimize_rate, random_controls, support_distance, ControlBasis, EventKind,
    LdpProblem, RateReport, MAX_BASIS_DIM,
};
use crate::noise::{build_correlation, build_l_refined, terminal_ball_rate, ConvolutionPath, CorrelationSpec, DiscreteLOperator, IncrementSampler};
use crate::oracles::{run_oracles, OracleResult};
use crate::parallel::map_indices;
use crate::rng::Streams;
use crate::solver::{solve_mild, solve_skeleton, SolverConfig, Trajectory, DEFAULT_BLOWUP_FACTOR};
use crate::stats::{gaussian_variance_se, mean, variance};

/// Relative mass drift allowed for noiseless runs.
const MASS_TOLERANCE: f64 = 1e-8;
/// Monte Carlo checks fail beyond this many standard errors.
const MC_SIGMAS: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl InvariantCheck {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub kind: ExperimentKind,
    pub out: PathBuf,
    pub artifacts: Vec<String>,
    pub checks: Vec<InvariantCheck>,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    fracnls_version: &'static str,
    kind: ExperimentKind,
    config: &'a RunConfig,
    artifacts: &'a [String],
    checks: &'a [InvariantCheck],
}

/// Run `cfg` and write everything under `out`.
pub fn run(cfg: &RunConfig, out: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let kind = cfg
        .kind
        .ok_or_else(|| Error::validation("$.kind", "experiment kind is required"))?;
    let mut resolved = cfg.clone();
    resolved.noise.alpha = Some(cfg.alpha());
    resolved.out = Some(out.to_path_buf());
    let mut ctx = Ctx {
        cfg: &resolved,
        out,
        artifacts: Vec::new(),
        checks: Vec::new(),
    };
    match kind {
        ExperimentKind::Fbm => run_fbm(&mut ctx)?,
        ExperimentKind::Convolution => run_convolution(&mut ctx)?,
        ExperimentKind::Solve => run_solve(&mut ctx)?,
        ExperimentKind::Skeleton => run_skeleton(&mut ctx)?,
        ExperimentKind::Ldp => run_ldp(&mut ctx)?,
        ExperimentKind::Holder => run_holder(&mut ctx)?,
        ExperimentKind::Support => run_support(&mut ctx)?,
        ExperimentKind::OracleSuite => run_oracle_suite(&mut ctx)?,
    }
    let Ctx { artifacts, checks, .. } = ctx;
    write_json(
        &out.join("manifest.json"),
        &Manifest {
            fracnls_version: env!("CARGO_PKG_VERSION"),
            kind,
            config: &resolved,
            artifacts: &artifacts,
            checks: &checks,
        },
    )?;
    let outcome = RunOutcome {
        kind,
        out: out.to_path_buf(),
        artifacts,
        checks,
    };
    if outcome.passed() {
        Ok(outcome)
    } else {
        let failed: Vec<String> = outcome
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| format!("{} ({})", c.name, c.detail))
            .collect();
        Err(Error::Invariant(failed.join("; ")))
    }
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    out: &'a Path,
    artifacts: Vec<String>,
    checks: Vec<InvariantCheck>,
}

impl Ctx<'_> {
    fn text(&mut self, name: &str, body: &str) -> Result<()> {
        write_atomic(&self.out.join(name), body.as_bytes())?;
        self.artifacts.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        write_json(&self.out.join(name), value)?;
        self.artifacts.push(name.to_string());
        Ok(())
    }

    fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.checks.push(InvariantCheck::new(name, passed, detail));
    }

    fn spec(&self) -> Result<CorrelationSpec> {
        let c = self.cfg;
        let spec = build_correlation(c.grid()?, c.noise.r, c.hurst, c.alpha())
            .map_err(|e| Error::validation("$.noise", e.to_string()))?;
        Ok(match c.noise.modes {
            Some(m) => spec.truncated(m),
            None => spec,
        })
    }

    fn operator(&self) -> Result<DiscreteLOperator> {
        let kernel = HurstKernel::new(self.cfg.hurst)?;
        build_l_refined(&self.spec()?, &kernel, &self.cfg.timegrid()?, self.cfg.noise.substeps)
    }

    fn initial(&self) -> Result<ComplexField> {
        self.cfg.initial.build(self.cfg.grid()?)
    }

    fn solver(&self, u0: &ComplexField) -> Result<SolverConfig> {
        let h1 = crate::field::sobolev_norm(u0, SobolevIndex::H1);
        let m = self
            .cfg
            .solver
            .blowup_threshold
            .unwrap_or(DEFAULT_BLOWUP_FACTOR * h1.max(1.0));
        SolverConfig::with_grid(self.cfg.timegrid()?, m, u0)?.with_substep_tolerance(self.cfg.solver.substep_tolerance)
    }

    fn problem(&self, op: DiscreteLOperator) -> Result<LdpProblem> {
        let u0 = self.initial()?;
        let cfg = self.solver(&u0)?;
        LdpProblem::new(u0, self.cfg.nonlinearity, cfg, op, self.cfg.ldp.event)
    }
}

fn run_fbm(ctx: &mut Ctx) -> Result<()> {
    let c = ctx.cfg;
    let tg = c.timegrid()?;
    let paths = match c.fbm_method {
        FbmMethod::Exact => sample_fbm_exact(c.hurst, &tg, c.replicates, c.seed)?,
        FbmMethod::Circulant => sample_fbm_fast(c.hurst, &tg, c.replicates, c.seed)?,
    };
    ctx.text("paths.csv", &paths.to_csv())?;
    let terminal = paths.marginal(tg.steps());
    let want = tg.horizon().powf(2.0 * c.hurst);
    if c.replicates >= 30 {
        let got = variance(&terminal);
        let z = (got - want).abs() / gaussian_variance_se(want, c.replicates);
        ctx.check(
            "terminal-variance",
            z <= MC_SIGMAS,
            format!("Var beta(T) = {got:.5}, T^2H = {want:.5}, {z:.2} SE"),
        );
    }
    let starts_at_zero = paths.values.iter().all(|p| p[0] == 0.0);
    ctx.check("paths-start-at-zero", starts_at_zero, "beta(0) = 0 on every path");
    Ok(())
}

fn run_convolution(ctx: &mut Ctx) -> Result<()> {
    let c = ctx.cfg;
    let tg = c.timegrid()?;
    let n = tg.steps();
    let (first, terminals, modes, expected) = match c.noise.method {
        ConvolutionMethod::Cell => {
            let op = ctx.operator()?;
            let series = op.sample_replicates(c.replicates, c.seed);
            let first = op.to_path(&series[0], c.seed);
            // E|Z_j(T)|^2 = 2 Q_j(T, T) = 2 |row_T|^2 / ds.
            let ds = tg.refined(op.substeps).dt();
            let expected: Vec<f64> = op
                .cells
                .iter()
                .map(|m| 2.0 * m.row(n - 1).iter().map(|v| v.norm_sqr()).sum::<f64>() / ds)
                .collect();
            let terminals: Vec<Vec<num_complex::Complex64>> =
                series.iter().map(|s| s.iter().map(|z| z[n]).collect()).collect();
            (first, terminals, op.mode_indices(), Some(expected))
        }
        ConvolutionMethod::Increment => {
            let sampler = IncrementSampler::new(&ctx.spec()?, &tg)?;
            let modes: Vec<usize> = sampler.modes().iter().map(|m| m.index).collect();
            let paths = map_indices(c.replicates, |i| sampler.sample_path(c.seed, i as u64));
            let terminals = paths
                .iter()
                .map(|p| modes.iter().map(|&j| p.mode_value(n, j)).collect())
                .collect();
            (paths[0].clone(), terminals, modes, None)
        }
    };
    first.write_dir(&ctx.out.join("z"), ())?;
    ctx.artifacts.push("z/".to_string());
    let mut csv = String::from("replicate,mode,re,im\n");
    for (r, row) in terminals.iter().enumerate() {
        for (j, z) in modes.iter().zip(row) {
            let _ = writeln!(csv, "{r},{j},{},{}", fmt_f64(z.re), fmt_f64(z.im));
        }
    }
    ctx.text("terminal_modes.csv", &csv)?;
    ctx.check(
        "finite",
        terminals.iter().flatten().all(|z| z.re.is_finite() && z.im.is_finite()),
        "all sampled values finite",
    );
    if let Some(expected) = expected.filter(|_| c.replicates >= 100) {
        let mut worst = 0.0_f64;
        for (j, want) in expected.iter().enumerate() {
            // |Z_j(T)|^2 is exponential: its standard deviation equals its mean.
            let got = mean(&terminals.iter().map(|t| t[j].norm_sqr()).collect::<Vec<_>>());
            if *want > 0.0 {
                worst = worst.max((got - want).abs() / (want / (c.replicates as f64).sqrt()));
            }
        }
        ctx.check(
            "terminal-mode-variance",
            worst <= MC_SIGMAS,
            format!("worst mode {worst:.2} SE from 2 Q(T, T)"),
        );
    }
    Ok(())
}

fn forcing(ctx: &Ctx, grid: crate::field::GridSpec) -> Result<ConvolutionPath> {
    let c = ctx.cfg;
    let tg = c.timegrid()?;
    if c.solver.epsilon == 0.0 {
        return Ok(ConvolutionPath::zero(grid, tg, c.hurst));
    }
    Ok(match c.noise.method {
        ConvolutionMethod::Cell => {
            let op = ctx.operator()?;
            let series = op.sample_modes(&mut Streams::new(c.seed).derive("solve").rng(0));
            op.to_path(&series, c.seed)
        }
        ConvolutionMethod::Increment => IncrementSampler::new(&ctx.spec()?, &tg)?.sample_path(c.seed, 0),
    })
}

/// Mass drift over the live part of a trajectory.
fn mass_drift(traj: &Trajectory) -> f64 {
    let m0 = mass(&traj.fields()[0]);
    traj.fields()
        .iter()
        .map(|f| (mass(f) - m0).abs() / m0.max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

fn trajectory_checks(ctx: &mut Ctx, traj: &Trajectory, conservative: bool) {
    let live = traj.fields().len();
    let n = traj.timegrid.steps();
    let consistent = match traj.cemetery_index() {
        Some(k) => live == k && k <= n,
        None => live == n + 1,
    };
    ctx.check(
        "cemetery-consistency",
        consistent && traj.diagnostics().len() == live,
        format!("{live} live states, cemetery {:?}", traj.cemetery_index()),
    );
    if conservative && !traj.fields().is_empty() {
        let d = mass_drift(traj);
        ctx.check("mass-conservation", d < MASS_TOLERANCE, format!("relative mass drift {d:.2e}"));
    }
}

fn run_solve(ctx: &mut Ctx) -> Result<()> {
    let c = ctx.cfg;
    let u0 = ctx.initial()?;
    let cfg = ctx.solver(&u0)?;
    let z = forcing(ctx, *u0.grid())?;
    let traj = solve_mild(&u0, &c.nonlinearity, &z, c.solver.epsilon, &cfg)?;
    traj.write_dir(&ctx.out.join("trajectory"), c.solver.snapshot_every, ())?;
    ctx.artifacts.push("trajectory/".to_string());
    trajectory_checks(ctx, &traj, c.solver.epsilon == 0.0);
    Ok(())
}

fn load_control(ctx: &Ctx, op: &DiscreteLOperator) -> Result<Control> {
    Ok(match &ctx.cfg.control {
        ControlSource::Zero => Control::zero(op.timegrid, op.mode_indices()),
        ControlSource::Random { index } => random_controls(op, index + 1, ctx.cfg.seed).swap_remove(*index),
        ControlSource::File { path } => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let h: Control = serde_json::from_str(&text).map_err(|e| Error::validation("$.control.path", e.to_string()))?;
            if h.grid != op.timegrid {
                return Err(Error::validation("$.control.path", "control time grid differs from the run's"));
            }
            h
        }
    })
}

fn run_skeleton(ctx: &mut Ctx) -> Result<()> {
    let c = ctx.cfg;
    let op = ctx.operator()?;
    let h = load_control(ctx, &op)?;
    let u0 = ctx.initial()?;
    let cfg = ctx.solver(&u0)?;
    let traj = solve_skeleton(&u0, &h, &c.nonlinearity, &op, &cfg)?;
    traj.write_dir(&ctx.out.join("trajectory"), c.solver.snapshot_every, ())?;
    ctx.artifacts.push("trajectory/".to_string());
    #[derive(Serialize)]
    struct ControlFile<'a> {
        energy: f64,
        #[serde(flatten)]
        control: &'a Control,
    }
    ctx.json(
        "control.json",
        &ControlFile {
            energy: h.energy(),
            control: &h,
        },
    )?;
    trajectory_checks(ctx, &traj, h.is_zero());
    Ok(())
}

fn run_ldp(ctx: &mut Ctx) -> Result<()> {
    let c = ctx.cfg;
    let op = ctx.operator()?;
    let problem = ctx.problem(op)?;
    let estimates = c
        .ldp
        .eps_ladder
        .iter()
        .map(|&eps| estimate_event_probability(&problem, eps, c.replicates, c.seed))
        .collect::<Result<Vec<_>>>()?;
    let slope = ldp_slope(&estimates).ok();
    let event = c.ldp.event;
    let gaussian_rate = if c.nonlinearity.is_linear()
        && problem.u0.sup_norm() == 0.0
        && event.kind == EventKind::TerminalBallExit
    {
        Some(terminal_ball_rate(&problem.operator, event.threshold, event.norm)?.0)
    } else {
        None
    };
    let tf = c.ldp.time_functions;
    let fit = (MAX_BASIS_DIM / (2 * tf)).max(1);
    let count = c.ldp.basis_modes.unwrap_or(fit).min(problem.operator.modes.len());
    let basis = ControlBasis::new(problem.operator.mode_indices()[..count].to_vec(), tf)
        .map_err(|e| Error::validation("$.ldp.basis_modes", e.to_string()))?;
    let best = minimize_rate(&problem, &basis, c.ldp.budget, c.seed)?;
    let report = RateReport {
        event,
        estimates: estimates.clone(),
        slope,
        upper_bound: best.feasible.then_some(best.rate),
        gaussian_rate,
    };
    ctx.json("rate_report.json", &report)?;
    ctx.text("ladder.csv", &report.ladder_csv())?;
    ctx.json("optimal_control.json", &best.control)?;

    // Sort by eps descending: probabilities must not increase as eps shrinks.
    let mut ladder = estimates;
    ladder.sort_by(|a, b| b.eps.total_cmp(&a.eps));
    let monotone = ladder.windows(2).all(|w| w[1].ci_lo <= w[0].ci_hi);
    ctx.check("ladder-monotone", monotone, "Wilson intervals nonincreasing as eps decreases");
    match slope {
        Some(s) => ctx.check(
            "rate-positive",
            s.rate_lower_95() > 0.0,
            format!("rate {:.4} +- {:.4}", s.rate, s.rate_se),
        ),
        None => ctx.check("rate-positive", true, "fewer than four rungs with hits; no slope fitted"),
    }
    ctx.check(
        "optimizer-feasible",
        best.feasible,
        format!("upper bound {:.4} after {} stages", best.rate, best.stages),
    );
    Ok(())
}

#[derive(Serialize)]
struct HolderSummary<'a> {
    hurst: f64,
    target: HolderTarget,
    norm: SobolevIndex,
    mean_exponent: f64,
    min_exponent: f64,
    max_exponent: f64,
    paths: &'a [HolderReport],
}

fn run_holder(ctx: &mut Ctx) -> Result<()> {
    let c = ctx.cfg;
    let tg = c.timegrid()?;
    let reports: Vec<HolderReport> = match c.holder.target {
        HolderTarget::Fbm => {
            let sampler: Box<dyn FbmSampler + Send + Sync> = match CirculantSampler::new(c.hurst, &tg)? {
                Some(s) => Box::new(s),
                None => Box::new(CholeskySampler::new(c.hurst, &tg)?),
            };
            let streams = Streams::new(c.seed).derive("holder");
            map_indices(c.holder.paths, |i| holder_exponent(&sampler.sample_path(&mut streams.rng(i as u64))))
                .into_iter()
                .collect::<Result<_>>()?
        }
        HolderTarget::Convolution => {
            let sampler = IncrementSampler::new(&ctx.spec()?, &tg)?;
            (0..c.holder.paths)
                .map(|i| holder_exponent_fields(&sampler.sample_path(c.seed, i as u64).fields, c.holder.norm))
                .collect::<Result<_>>()?
        }
    };
    let exps: Vec<f64> = reports.iter().map(|r| r.exponent).collect();
    let lo = exps.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut csv = String::from("path,exponent,r_squared,sup_exponent,degenerate\n");
    for (i, r) in reports.iter().enumerate() {
        let _ = writeln!(
            csv,
            "{i},{},{},{},{}",
            fmt_f64(r.exponent),
            fmt_f64(r.r_squared),
            fmt_f64(r.sup_exponent),
            r.degenerate
        );
    }
    ctx.text("holder.csv", &csv)?;
    ctx.json(
        "holder_report.json",
        &HolderSummary {
            hurst: c.hurst,
            target: c.holder.target,
            norm: c.holder.norm,
            mean_exponent: mean(&exps),
            min_exponent: lo,
            max_exponent: hi,
            paths: &reports,
        },
    )?;
    ctx.check(
        "nondegenerate",
        reports.iter().all(|r| !r.degenerate),
        "every path has nonzero increments",
    );
    ctx.check(
        "exponent-floor",
        lo >= c.hurst - 0.1,
        format!("min exponent {lo:.3} against H - 0.1 = {:.3}", c.hurst - 0.1),
    );
    Ok(())
}

#[derive(Serialize)]
struct SupportReport {
    samples: usize,
    epsilon: f64,
    family_sizes: Vec<usize>,
    median_distance: Vec<f64>,
}

fn run_support(ctx: &mut Ctx) -> Result<()> {
    let c = ctx.cfg;
    let op = ctx.operator()?;
    let largest = *c.support.family_sizes.last().unwrap_or(&0);
    let family = random_controls(&op, largest, c.seed);
    let problem = ctx.problem(op)?;
    let streams = Streams::new(c.seed).derive("support-samples");
    let samples = map_indices(c.support.samples, |i| problem.sample(c.support.epsilon, &mut streams.rng(i as u64)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let skeletons = map_indices(family.len(), |i| problem.skeleton(&family[i]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let medians: Vec<f64> = c
        .support
        .family_sizes
        .iter()
        .map(|&m| support_distance(&samples, &skeletons[..m]))
        .collect();
    let mut csv = String::from("controls,median_distance\n");
    for (m, d) in c.support.family_sizes.iter().zip(&medians) {
        let _ = writeln!(csv, "{m},{}", fmt_f64(*d));
    }
    ctx.text("support.csv", &csv)?;
    ctx.json(
        "support.json",
        &SupportReport {
            samples: c.support.samples,
            epsilon: c.support.epsilon,
            family_sizes: c.support.family_sizes.clone(),
            median_distance: medians.clone(),
        },
    )?;
    ctx.check(
        "distance-nonincreasing",
        medians.windows(2).all(|w| w[1] <= w[0]),
        format!("medians {:?}", medians.iter().map(|d| format!("{d:.4}")).collect::<Vec<_>>()),
    );
    Ok(())
}

#[derive(Serialize)]
struct OracleReport<'a> {
    quick: bool,
    passed: usize,
    failed: usize,
    results: &'a [OracleResult],
}

fn run_oracle_suite(ctx: &mut Ctx) -> Result<()> {
    let c = ctx.cfg;
    let results = run_oracles(c.oracles.quick, c.seed);
    let passed = results.iter().filter(|r| r.passed).count();
    ctx.json(
        "oracle_report.json",
        &OracleReport {
            quick: c.oracles.quick,
            passed,
            failed: results.len() - passed,
            results: &results,
        },
    )?;
    for r in &results {
        ctx.check(
            &format!("oracle:{}", r.name),
            r.passed,
            format!("residual {:.3e} (tolerance {:.1e})", r.residual, r.tolerance),
        );
    }
    Ok(())
}

