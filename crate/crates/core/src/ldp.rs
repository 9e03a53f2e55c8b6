//! Monte Carlo large-deviation checks, rate minimization over controls, and
//! support proximity.

use std::fmt::Write as _;

use argmin::core::{CostFunction, Executor, Gradient, State};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::BFGS;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::control::Control;
use crate::error::{Error, Result};
use crate::field::{sobolev_norm, ComplexField, SobolevIndex};
use crate::io::fmt_f64;
use crate::noise::{ConvolutionPath, DiscreteLOperator};
use crate::nonlinearity::NonlinearitySpec;
use crate::parallel::map_indices;
use crate::rng::{standard_normal, StreamRng, Streams};
use crate::solver::{solve_mild, solve_skeleton, sup_h1_distance, SolverConfig, Trajectory};
use crate::stats::{linear_fit, mean, median, wilson_interval, Z95};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    /// `|u(T) - u_det(T)|_{H^s} > delta`, or blow-up before `T`.
    TerminalBallExit,
    /// `sup_k |u(t_k)|_{H^s} > delta`, or blow-up before `T`.
    SupNormExceed,
    /// The trajectory reaches the cemetery before `T`.
    BlowUpBeforeT,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventSpec {
    pub kind: EventKind,
    pub threshold: f64,
    #[serde(default = "default_norm")]
    pub norm: SobolevIndex,
}

fn default_norm() -> SobolevIndex {
    SobolevIndex::L2
}

impl EventSpec {
    /// How far `traj` is from realizing the event (zero when it does), with
    /// the threshold scaled by `1 + margin`.
    fn shortfall(&self, traj: &Trajectory, reference: &Trajectory, cap: f64, margin: f64) -> f64 {
        if traj.cemetery_index().is_some() {
            return 0.0;
        }
        let target = self.threshold * (1.0 + margin);
        let n = traj.timegrid.steps();
        match self.kind {
            EventKind::TerminalBallExit => {
                let (Some(a), Some(b)) = (traj.state(n), reference.state(n)) else {
                    return 0.0;
                };
                let d = a.sub(b).map_or(f64::INFINITY, |z| sobolev_norm(&z, self.norm));
                (target - d).max(0.0)
            }
            EventKind::SupNormExceed => {
                let sup = traj
                    .fields()
                    .iter()
                    .map(|u| sobolev_norm(u, self.norm))
                    .fold(0.0, f64::max);
                (target - sup).max(0.0)
            }
            EventKind::BlowUpBeforeT => {
                let peak = traj.diagnostics().iter().map(|d| d.h1).fold(0.0, f64::max);
                (cap * (1.0 + margin) - peak).max(0.0)
            }
        }
    }

    fn occurred(&self, traj: &Trajectory, reference: &Trajectory, cap: f64) -> bool {
        if traj.cemetery_index().is_some() {
            return true;
        }
        let n = traj.timegrid.steps();
        match self.kind {
            EventKind::TerminalBallExit => match (traj.state(n), reference.state(n)) {
                (Some(a), Some(b)) => a.sub(b).is_ok_and(|z| sobolev_norm(&z, self.norm) > self.threshold),
                _ => true,
            },
            EventKind::SupNormExceed => traj
                .fields()
                .iter()
                .any(|u| sobolev_norm(u, self.norm) > self.threshold),
            EventKind::BlowUpBeforeT => {
                let _ = cap;
                false
            }
        }
    }
}

/// Everything needed to sample `u^eps` and to evaluate skeletons.
#[derive(Clone, Debug)]
pub struct LdpProblem {
    pub u0: ComplexField,
    pub nl: NonlinearitySpec,
    pub cfg: SolverConfig,
    pub operator: DiscreteLOperator,
    pub event: EventSpec,
    reference: Trajectory,
}

impl LdpProblem {
    pub fn new(
        u0: ComplexField,
        nl: NonlinearitySpec,
        cfg: SolverConfig,
        operator: DiscreteLOperator,
        event: EventSpec,
    ) -> Result<Self> {
        if operator.timegrid != cfg.timegrid || operator.grid != *u0.grid() {
            return Err(Error::GridMismatch);
        }
        let zero = ConvolutionPath::zero(operator.grid, cfg.timegrid, operator.kernel.hurst());
        let reference = solve_mild(&u0, &nl, &zero, 0.0, &cfg)?;
        Ok(Self {
            u0,
            nl,
            cfg,
            operator,
            event,
            reference,
        })
    }

    /// The deterministic flow.
    pub fn reference(&self) -> &Trajectory {
        &self.reference
    }

    pub fn sample(&self, eps: f64, rng: &mut StreamRng) -> Result<Trajectory> {
        let series = self.operator.sample_modes(rng);
        let z = self.operator.to_path(&series, 0);
        solve_mild(&self.u0, &self.nl, &z, eps, &self.cfg)
    }

    pub fn skeleton(&self, h: &Control) -> Result<Trajectory> {
        solve_skeleton(&self.u0, h, &self.nl, &self.operator, &self.cfg)
    }

    pub fn event_occurred(&self, traj: &Trajectory) -> bool {
        self.event.occurred(traj, &self.reference, self.cfg.blowup_threshold)
    }

    fn shortfall(&self, traj: &Trajectory, margin: f64) -> f64 {
        self.event
            .shortfall(traj, &self.reference, self.cfg.blowup_threshold, margin)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityEstimate {
    pub eps: f64,
    pub hits: usize,
    pub replicates: usize,
    pub p_hat: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

impl ProbabilityEstimate {
    /// `-eps log p_hat` (infinite when the event was never hit).
    pub fn scaled_log(&self) -> f64 {
        -self.eps * self.p_hat.ln()
    }

    pub fn never_hit(&self) -> bool {
        self.hits == 0
    }
}

/// Fraction of `replicates` trajectories realizing the event. Replicate `i`
/// draws from stream `(seed, "ldp", i)` at every `eps`, so a ladder shares
/// its noise across rungs.
pub fn estimate_event_probability(
    problem: &LdpProblem,
    eps: f64,
    replicates: usize,
    seed: u64,
) -> Result<ProbabilityEstimate> {
    if replicates < 100 {
        return Err(Error::domain(format!("need at least 100 replicates, got {replicates}")));
    }
    let streams = Streams::new(seed).derive("ldp");
    let hits = map_indices(replicates, |i| -> Result<bool> {
        let traj = problem.sample(eps, &mut streams.rng(i as u64))?;
        Ok(problem.event_occurred(&traj))
    })
    .into_iter()
    .try_fold(0usize, |acc, h| h.map(|h| acc + usize::from(h)))?;
    let (ci_lo, ci_hi) = wilson_interval(hits, replicates);
    Ok(ProbabilityEstimate {
        eps,
        hits,
        replicates,
        p_hat: hits as f64 / replicates as f64,
        ci_lo,
        ci_hi,
    })
}

/// Stabilized value of `-eps log p(eps)` across a ladder.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    /// Intercept of `-eps log p = rate + drift * eps`: the `eps -> 0` value.
    pub rate: f64,
    pub rate_se: f64,
    /// Linear drift across the ladder (prefactor effects).
    pub drift: f64,
    /// Plain mean of `-eps log p` over the ladder.
    pub mean: f64,
    pub points: usize,
}

impl SlopeFit {
    /// Lower end of a two-sided 95% interval for the rate.
    pub fn rate_lower_95(&self) -> f64 {
        self.rate - Z95 * self.rate_se
    }
}

pub fn ldp_slope(ladder: &[ProbabilityEstimate]) -> Result<SlopeFit> {
    let usable: Vec<&ProbabilityEstimate> = ladder.iter().filter(|e| e.hits > 0 && e.eps > 0.0).collect();
    if usable.len() < 4 {
        return Err(Error::domain(format!(
            "insufficient data: {} ladder points with p_hat > 0, need 4",
            usable.len()
        )));
    }
    let xs: Vec<f64> = usable.iter().map(|e| e.eps).collect();
    let ys: Vec<f64> = usable.iter().map(|e| e.scaled_log()).collect();
    let fit = linear_fit(&xs, &ys);
    // Binomial delta-method error of each point, propagated through the fit
    // on top of the regression residual.
    let n = xs.len() as f64;
    let mx = mean(&xs);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let var_pts: f64 = usable
        .iter()
        .map(|e| {
            let w = 1.0 / n - mx * (e.eps - mx) / sxx;
            let var_log = (1.0 - e.p_hat) / (e.hits as f64);
            w * w * e.eps * e.eps * var_log
        })
        .sum();
    Ok(SlopeFit {
        rate: fit.intercept,
        rate_se: (fit.intercept_se.powi(2) + var_pts).sqrt(),
        drift: fit.slope,
        mean: mean(&ys),
        points: usable.len(),
    })
}

/// Ladder results with the slope and the optimizer's upper bound.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RateReport {
    pub event: EventSpec,
    pub estimates: Vec<ProbabilityEstimate>,
    pub slope: Option<SlopeFit>,
    pub upper_bound: Option<f64>,
    pub gaussian_rate: Option<f64>,
}

impl RateReport {
    /// `eps,p_hat,ci_lo,ci_hi,neg_eps_log_p`.
    pub fn ladder_csv(&self) -> String {
        let mut out = String::from("eps,p_hat,ci_lo,ci_hi,neg_eps_log_p\n");
        for e in &self.estimates {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                fmt_f64(e.eps),
                fmt_f64(e.p_hat),
                fmt_f64(e.ci_lo),
                fmt_f64(e.ci_hi),
                fmt_f64(e.scaled_log())
            );
        }
        out
    }
}

/// Tensor basis: active noise modes times hat functions in time, with a real
/// and an imaginary coefficient each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlBasis {
    pub modes: Vec<usize>,
    pub time_functions: usize,
}

pub const MAX_BASIS_DIM: usize = 64;

impl ControlBasis {
    pub fn new(modes: Vec<usize>, time_functions: usize) -> Result<Self> {
        let b = Self { modes, time_functions };
        if b.time_functions < 2 {
            return Err(Error::domain("need at least two time functions"));
        }
        if b.dim() > MAX_BASIS_DIM || b.dim() == 0 {
            return Err(Error::domain(format!(
                "basis dimension {} outside 1..={MAX_BASIS_DIM}",
                b.dim()
            )));
        }
        Ok(b)
    }

    pub fn dim(&self) -> usize {
        2 * self.modes.len() * self.time_functions
    }

    /// Hat function `b` (nodes uniformly spaced on `[0, T]`) at `t`.
    fn hat(&self, b: usize, t: f64, horizon: f64) -> f64 {
        let step = horizon / (self.time_functions - 1) as f64;
        (1.0 - ((t - b as f64 * step) / step).abs()).max(0.0)
    }

    /// Piecewise-constant control from coefficients, hats sampled at cell midpoints.
    pub fn control(&self, theta: &[f64], op: &DiscreteLOperator) -> Control {
        let tg = op.timegrid;
        let n = tg.steps();
        let values = op
            .mode_indices()
            .iter()
            .map(|idx| match self.modes.iter().position(|m| m == idx) {
                Some(j) => (0..n)
                    .map(|c| {
                        let mid = 0.5 * (tg.point(c) + tg.point(c + 1));
                        (0..self.time_functions).fold(Complex64::new(0.0, 0.0), |acc, b| {
                            let o = 2 * (j * self.time_functions + b);
                            acc + Complex64::new(theta[o], theta[o + 1]) * self.hat(b, mid, tg.horizon())
                        })
                    })
                    .collect(),
                None => vec![Complex64::new(0.0, 0.0); n],
            })
            .collect();
        Control {
            grid: tg,
            modes: op.mode_indices(),
            values,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerBudget {
    pub penalty_stages: usize,
    pub iterations_per_stage: u64,
    pub initial_penalty: f64,
}

impl Default for OptimizerBudget {
    fn default() -> Self {
        Self {
            penalty_stages: 7,
            iterations_per_stage: 200,
            initial_penalty: 10.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RateMinimum {
    pub control: Control,
    /// `1/2 |h*|^2`: an upper bound on the rate of the event.
    pub rate: f64,
    /// The skeleton driven by `h*` realizes the event.
    pub feasible: bool,
    pub stages: usize,
}

/// Margin added to the event threshold inside the penalty.
const PENALTY_MARGIN: f64 = 1e-3;

struct Penalized<'a> {
    problem: &'a LdpProblem,
    basis: &'a ControlBasis,
    penalty: f64,
}

impl Penalized<'_> {
    fn value(&self, theta: &[f64]) -> f64 {
        let h = self.basis.control(theta, &self.problem.operator);
        match self.problem.skeleton(&h) {
            Ok(traj) => {
                let s = self.problem.shortfall(&traj, PENALTY_MARGIN);
                h.energy() + self.penalty * s * s
            }
            Err(_) => f64::INFINITY,
        }
    }
}

impl CostFunction for Penalized<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, theta: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        Ok(self.value(theta))
    }
}

impl Gradient for Penalized<'_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    /// Central differences, one pair of skeleton solves per coordinate.
    fn gradient(&self, theta: &Vec<f64>) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        let dim = theta.len();
        Ok(map_indices(dim, |i| {
            let step = 1e-6 * theta[i].abs().max(1e-2);
            let mut a = theta.clone();
            let mut b = theta.clone();
            a[i] += step;
            b[i] -= step;
            (self.value(&a) - self.value(&b)) / (2.0 * step)
        }))
    }
}

/// Penalty continuation: BFGS on `1/2|h|^2 + mu shortfall^2`, with `mu`
/// multiplied by 10 per stage until the skeleton realizes the event.
pub fn minimize_rate(
    problem: &LdpProblem,
    basis: &ControlBasis,
    budget: OptimizerBudget,
    seed: u64,
) -> Result<RateMinimum> {
    let zero = Control::zero(problem.cfg.timegrid, problem.operator.mode_indices());
    if problem.event_occurred(problem.reference()) {
        return Ok(RateMinimum {
            control: zero,
            rate: 0.0,
            feasible: true,
            stages: 0,
        });
    }
    let mut rng = Streams::new(seed).derive("minimize-rate").rng(0);
    let mut theta: Vec<f64> = (0..basis.dim()).map(|_| 0.01 * standard_normal(&mut rng)).collect();
    let mut penalty = budget.initial_penalty;
    let feasible_at = |theta: &[f64]| -> Result<bool> {
        let h = basis.control(theta, &problem.operator);
        Ok(problem.event_occurred(&problem.skeleton(&h)?))
    };
    let mut stages = 0;
    let mut feasible = false;
    for _ in 0..budget.penalty_stages {
        stages += 1;
        let cost = Penalized {
            problem,
            basis,
            penalty,
        };
        let identity: Vec<Vec<f64>> = (0..theta.len())
            .map(|i| (0..theta.len()).map(|j| f64::from(u8::from(i == j))).collect())
            .collect();
        let solver = BFGS::new(MoreThuenteLineSearch::new()).with_tolerance_grad(1e-10).map_err(optim_error)?;
        let start = theta.clone();
        let res = Executor::new(cost, solver)
            .configure(|st| st.param(start).inv_hessian(identity).max_iters(budget.iterations_per_stage))
            .run();
        if let Ok(res) = res {
            if let Some(best) = res.state().get_best_param() {
                theta = best.clone();
            }
        }
        if feasible_at(&theta)? {
            feasible = true;
            break;
        }
        penalty *= 10.0;
    }
    if !feasible {
        // Restore feasibility along the ray through the last iterate.
        for m in 1..=400 {
            let scale = 1.0 + 1e-3 * m as f64;
            let scaled: Vec<f64> = theta.iter().map(|x| x * scale).collect();
            if feasible_at(&scaled)? {
                theta = scaled;
                feasible = true;
                break;
            }
        }
    }
    let control = basis.control(&theta, &problem.operator);
    Ok(RateMinimum {
        rate: control.energy(),
        control,
        feasible,
        stages,
    })
}

fn optim_error(e: argmin::core::Error) -> Error {
    Error::domain(format!("optimizer setup failed: {e}"))
}

/// Discrete white-noise controls: each cell value has independent real and
/// imaginary parts of variance `1 / dt`, so `L h` has the law of the sampled
/// convolution on the coarse grid.
pub fn random_controls(op: &DiscreteLOperator, count: usize, seed: u64) -> Vec<Control> {
    let streams = Streams::new(seed).derive("random-controls");
    let n = op.timegrid.steps();
    let sd = 1.0 / op.timegrid.dt().sqrt();
    (0..count)
        .map(|i| {
            let mut rng = streams.rng(i as u64);
            let values = op
                .modes
                .iter()
                .map(|_| {
                    (0..n)
                        .map(|_| {
                            let re = standard_normal(&mut rng);
                            let im = standard_normal(&mut rng);
                            Complex64::new(re, im) * sd
                        })
                        .collect()
                })
                .collect();
            Control {
                grid: op.timegrid,
                modes: op.mode_indices(),
                values,
            }
        })
        .collect()
}

/// Median over samples of the sup-in-time `H^1` distance to the nearest
/// skeleton trajectory of the family.
pub fn support_distance(samples: &[Trajectory], skeletons: &[Trajectory]) -> f64 {
    let d: Vec<f64> = map_indices(samples.len(), |i| {
        skeletons
            .iter()
            .map(|s| sup_h1_distance(&samples[i], s))
            .fold(f64::INFINITY, f64::min)
    });
    median(&d)
}

/// [`support_distance`] for a family given by controls.
pub fn support_distance_controls(problem: &LdpProblem, samples: &[Trajectory], family: &[Control]) -> Result<f64> {
    let skeletons = map_indices(family.len(), |i| problem.skeleton(&family[i]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(support_distance(samples, &skeletons))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbm::TimeGrid;
    use crate::field::GridSpec;
    use crate::kernel::HurstKernel;
    use crate::noise::{build_correlation, build_l_refined};
    use std::f64::consts::PI;

    fn linear_problem(delta: f64) -> LdpProblem {
        let grid = GridSpec::new(1, 8, PI / 2.0).unwrap();
        let spec = build_correlation(grid, 8.0, 0.7, 0.3).unwrap().truncated(4);
        let k = HurstKernel::new(0.7).unwrap();
        let tg = TimeGrid::new(1.0, 8).unwrap();
        let op = build_l_refined(&spec, &k, &tg, 2).unwrap();
        let u0 = ComplexField::zeros(grid);
        let cfg = SolverConfig::with_grid(tg, 1e6, &u0).unwrap();
        let event = EventSpec {
            kind: EventKind::TerminalBallExit,
            threshold: delta,
            norm: SobolevIndex::L2,
        };
        LdpProblem::new(u0, NonlinearitySpec::linear(), cfg, op, event).unwrap()
    }

    #[test]
    fn synthetic_slope_recovery() {
        let c: f64 = 0.37;
        let ladder: Vec<ProbabilityEstimate> = [0.25, 0.16, 0.09, 0.04]
            .iter()
            .map(|&eps| {
                let p = (-c / eps).exp();
                ProbabilityEstimate {
                    eps,
                    hits: 1_000_000,
                    replicates: (1_000_000.0 / p) as usize,
                    p_hat: p,
                    ci_lo: p,
                    ci_hi: p,
                }
            })
            .collect();
        let fit = ldp_slope(&ladder).unwrap();
        assert!((fit.rate - c).abs() < 1e-12);
        assert!(fit.drift.abs() < 1e-10);
        assert!((fit.mean - c).abs() < 1e-12);
        assert!(ldp_slope(&ladder[..3]).is_err());
    }

    #[test]
    fn trivial_probabilities() {
        let p = linear_problem(0.5);
        let e0 = estimate_event_probability(&p, 0.0, 100, 1).unwrap();
        assert_eq!(e0.hits, 0);
        assert!(e0.never_hit());
        let mut sup = p.clone();
        sup.event = EventSpec {
            kind: EventKind::SupNormExceed,
            threshold: 0.0,
            norm: SobolevIndex::L2,
        };
        let e1 = estimate_event_probability(&sup, 0.1, 100, 1).unwrap();
        assert_eq!(e1.p_hat, 1.0);
        assert!(estimate_event_probability(&p, 0.1, 99, 1).is_err());
    }

    #[test]
    fn zero_control_when_flow_is_in_event() {
        let mut p = linear_problem(0.5);
        p.event = EventSpec {
            kind: EventKind::SupNormExceed,
            threshold: -1.0,
            norm: SobolevIndex::L2,
        };
        let basis = ControlBasis::new(p.operator.mode_indices(), 3).unwrap();
        let r = minimize_rate(&p, &basis, OptimizerBudget::default(), 0).unwrap();
        assert_eq!(r.rate, 0.0);
        assert!(r.control.is_zero());
    }

    #[test]
    fn optimizer_is_monotone_in_delta_and_feasible() {
        let basis_for = |p: &LdpProblem| ControlBasis::new(p.operator.mode_indices()[..2].to_vec(), 3).unwrap();
        let p1 = linear_problem(0.4);
        let p2 = linear_problem(0.8);
        let r1 = minimize_rate(&p1, &basis_for(&p1), OptimizerBudget::default(), 3).unwrap();
        let r2 = minimize_rate(&p2, &basis_for(&p2), OptimizerBudget::default(), 3).unwrap();
        assert!(r1.feasible && r2.feasible);
        assert!(r2.rate > r1.rate);
        // Closed-form rate is quadratic in delta.
        assert!((r2.rate / r1.rate - 4.0).abs() < 0.1);
    }

    #[test]
    fn support_distance_trivial_cases() {
        let p = linear_problem(0.5);
        let h = random_controls(&p.operator, 3, 9);
        let sk: Vec<Trajectory> = h.iter().map(|c| p.skeleton(c).unwrap()).collect();
        assert_eq!(support_distance(&sk[..1], &sk), 0.0);
        let mut rng = Streams::new(4).derive("t").rng(0);
        let s = p.sample(1.0, &mut rng).unwrap();
        let zero = Control::zero(p.cfg.timegrid, p.operator.mode_indices());
        let d = support_distance_controls(&p, std::slice::from_ref(&s), &[zero]).unwrap();
        assert_eq!(d, sup_h1_distance(&s, p.reference()));
    }

    #[test]
    fn basis_dimension_limit() {
        assert!(ControlBasis::new((0..8).collect(), 4).is_ok());
        assert!(ControlBasis::new((0..9).collect(), 4).is_err());
        assert!(ControlBasis::new(vec![0], 1).is_err());
    }
}
