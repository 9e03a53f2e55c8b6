//! Independent cross-checks of every computed quantity against a second
//! construction: closed forms, a different quadrature, or Monte Carlo.
//!
//! Each oracle reports a measured residual and the tolerance it must stay
//! below. Monte Carlo residuals are in standard errors.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::control::Control;
use crate::error::{Error, Result};
use crate::fbm::{build_covariance_matrix, kernel_covariance_matrix, sample_fbm_exact, sample_fbm_fast, CirculantSampler, FbmSampler, TimeGrid};
use crate::field::{
    apply_group, group_deviation_bound, group_deviation_norm, hamiltonian, l2_inner, mass, sobolev_norm, ComplexField,
    GridSpec, SobolevIndex,
};
use crate::holder::{holder_exponent, holder_exponent_fields};
use crate::kernel::{fbm_covariance, normalization_constant, HurstKernel};
use crate::ldp::{
    estimate_event_probability, ldp_slope, minimize_rate, random_controls, support_distance, ControlBasis, EventKind,
    EventSpec, LdpProblem, OptimizerBudget,
};
use crate::noise::{
    build_correlation, build_l, build_l_refined, build_q, gaussian_rate, real_covariance, real_vector,
    terminal_ball_rate, verify_factorization, ConvolutionPath, IncrementSampler,
};
use crate::nonlinearity::NonlinearitySpec;
use crate::path::{Path, Polynomial, StepPath};
use crate::quad::GaussKronrod;
use crate::rng::{standard_normal, Streams};
use crate::solver::{evaluate_nonlinearity, solve_mild, solve_skeleton, SolverConfig};
use crate::stats::{ks_two_sample, variance};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub name: String,
    pub passed: bool,
    pub residual: f64,
    pub tolerance: f64,
    pub detail: String,
}

/// Measured residual, tolerance, free-form detail.
type Outcome = Result<(f64, f64, String)>;

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// Monte Carlo sizes.
#[derive(Clone, Copy, Debug)]
struct Scale {
    fbm_replicates: usize,
    ks_replicates: usize,
    covariance_draws: usize,
    ladder_replicates: usize,
    holder_paths: usize,
}

impl Scale {
    fn new(quick: bool) -> Self {
        if quick {
            Self {
                fbm_replicates: 1000,
                ks_replicates: 500,
                covariance_draws: 4000,
                ladder_replicates: 4000,
                holder_paths: 4,
            }
        } else {
            Self {
                fbm_replicates: 5000,
                ks_replicates: 2000,
                covariance_draws: 20_000,
                ladder_replicates: 20_000,
                holder_paths: 20,
            }
        }
    }
}

/// Run every oracle; failures are recorded, never propagated.
pub fn run_oracles(quick: bool, seed: u64) -> Vec<OracleResult> {
    let s = Scale::new(quick);
    type Entry<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);
    let list: Vec<Entry> = vec![
        ("normalization-constant-0.75", Box::new(|| normalization(0.75, 1.0697))),
        ("normalization-constant-0.25", Box::new(|| normalization(0.25, 0.6460))),
        ("kernel-two-quadrature-rules", Box::new(kernel_two_rules)),
        ("kernel-derivative-fd-0.25", Box::new(|| kernel_derivative(0.25))),
        ("kernel-derivative-fd-0.75", Box::new(|| kernel_derivative(0.75))),
        ("fbm-covariance-formula", Box::new(covariance_formula)),
        ("kernel-covariance-matrix", Box::new(kernel_matrix)),
        ("fbm-exact-variance", Box::new(move || fbm_variance(s.fbm_replicates, seed))),
        ("fbm-circulant-vs-exact-ks", Box::new(move || circulant_ks(s.ks_replicates, seed))),
        ("duality-indicator", Box::new(duality_indicator)),
        ("duality-polynomial", Box::new(move || duality_polynomial(seed))),
        ("rkhs-indicator-norm", Box::new(|| rkhs(0.8, 0.8))),
        ("rkhs-indicator-pair", Box::new(|| rkhs(0.8, 0.3))),
        ("sobolev-single-mode", Box::new(single_mode_norm)),
        ("inner-product-orthogonal-modes", Box::new(orthogonal_modes)),
        ("group-sign", Box::new(group_sign)),
        ("group-deviation-scan", Box::new(group_scan)),
        ("constant-field-mass-hamiltonian", Box::new(constant_field)),
        ("plane-wave-mass", Box::new(plane_wave_mass)),
        ("hilbert-schmidt-convergence", Box::new(hs_convergence)),
        ("brownian-mode-variance", Box::new(move || brownian_mode_variance(s.fbm_replicates, seed))),
        ("q-equals-l-l-adjoint", Box::new(q_factorization)),
        ("sampler-covariance-mc", Box::new(move || sampler_covariance(s.covariance_draws, seed))),
        ("gaussian-rate-row-space", Box::new(move || rate_row_space(seed))),
        ("saturated-small-kappa", Box::new(saturated_limit)),
        ("plane-wave-exact-solution", Box::new(plane_wave_solution)),
        ("defocusing-no-cemetery", Box::new(defocusing_bounded)),
        ("focusing-blow-up", Box::new(focusing_blowup)),
        ("linear-skeleton", Box::new(linear_skeleton)),
        ("linear-terminal-tail", Box::new(move || terminal_tail(s.ladder_replicates, seed))),
        ("linear-ldp-triangle", Box::new(move || ldp_triangle(s.ladder_replicates, seed))),
        ("optimizer-doubling-delta", Box::new(optimizer_doubling)),
        ("support-family-enrichment", Box::new(move || support_enrichment(seed))),
        ("holder-fbm", Box::new(move || holder_fbm(seed))),
        ("holder-convolution-h1", Box::new(move || holder_convolution(s.holder_paths, seed))),
    ];
    list.into_iter()
        .map(|(name, f)| match f() {
            Ok((residual, tolerance, detail)) => OracleResult {
                name: name.to_string(),
                passed: residual < tolerance,
                residual,
                tolerance,
                detail,
            },
            Err(e) => OracleResult {
                name: name.to_string(),
                passed: false,
                residual: f64::NAN,
                tolerance: f64::NAN,
                detail: e.to_string(),
            },
        })
        .collect()
}

fn normalization(h: f64, rounded: f64) -> Outcome {
    let got = normalization_constant(h)?;
    let oracle = (0.5 * ((2.0 * h).ln() + ln_gamma(1.5 - h) - ln_gamma(h + 0.5) - ln_gamma(2.0 - 2.0 * h))).exp();
    Ok(((got - oracle).abs(), 1e-12, format!("c_H={got:.6} (rounded {rounded})")))
}

fn kernel_two_rules() -> Outcome {
    let (h, t, s) = (0.7_f64, 1.0, 0.5);
    let k = HurstKernel::new(h)?;
    let c = normalization_constant(h)?;
    let gk = GaussKronrod {
        rel_tol: 1e-14,
        abs_tol: 1e-15,
        max_intervals: 20_000,
    };
    let integral = gk
        .integrate(s, t, |u: f64| (u - s).powf(h - 1.5) * (1.0 - (s / u).powf(0.5 - h)))
        .value;
    let oracle = c * (t - s).powf(h - 0.5) + c * (0.5 - h) * integral;
    let got = k.eval(t, s)?;
    Ok(((got - oracle).abs(), 1e-8, format!("K(1,0.5)={got:.10}")))
}

fn kernel_derivative(h: f64) -> Outcome {
    let k = HurstKernel::new(h)?;
    let (t, s, step) = (1.0, 0.5, 1e-6);
    let fd = (k.eval(t + step, s)? - k.eval(t - step, s)?) / (2.0 * step);
    let d = k.time_derivative(t, s)?;
    let sign_ok = d.signum() == (h - 0.5).signum();
    let rel = ((d - fd) / fd).abs();
    Ok((if sign_ok { rel } else { f64::INFINITY }, 1e-4, format!("dK/dt={d:.6e}")))
}

fn covariance_formula() -> Outcome {
    let v = fbm_covariance(0.75, 1.0, 3.0)?;
    let direct = 0.5 * (1.0 + 3f64.powf(1.5) - 2f64.powf(1.5));
    Ok(((v - direct).abs(), 1e-12, format!("R(1,3)={v:.6} (about 1.6839)")))
}

fn kernel_matrix() -> Outcome {
    let tg = TimeGrid::new(1.0, 64)?;
    let k = HurstKernel::new(0.7)?;
    let err = (kernel_covariance_matrix(&k, &tg) - build_covariance_matrix(0.7, &tg)?).amax();
    Ok((err, 1e-3, "H=0.7, n=64".into()))
}

fn fbm_variance(reps: usize, seed: u64) -> Outcome {
    let tg = TimeGrid::new(1.0, 64)?;
    let set = sample_fbm_exact(0.7, &tg, reps, seed)?;
    let mut worst = 0.0_f64;
    for k in [16, 40, 64] {
        let target = tg.point(k).powf(1.4);
        let v = variance(&set.marginal(k));
        worst = worst.max((v - target).abs() / (target * (2.0 / (reps - 1) as f64).sqrt()));
    }
    Ok((worst, 4.0, format!("{reps} replicates, H=0.7")))
}

fn circulant_ks(reps: usize, seed: u64) -> Outcome {
    let tg = TimeGrid::new(1.0, 1024)?;
    let a = sample_fbm_exact(0.7, &tg, reps, seed)?.marginal(1024);
    let b = sample_fbm_fast(0.7, &tg, reps, seed.wrapping_add(1))?.marginal(1024);
    let ks = ks_two_sample(&a, &b);
    // Residual is 0.01 / p so that passing means p > 0.01.
    Ok((0.01 / ks.p_value.max(1e-300), 1.0, format!("KS p-value {:.3}", ks.p_value)))
}

fn duality_indicator() -> Outcome {
    let k = HurstKernel::new(0.7)?;
    let t = 0.6;
    let phi = Path::Step(StepPath::indicator(t, 1.0)?);
    let one = Path::Step(StepPath::constant(1.0, 1.0));
    let (lhs, rhs) = k.duality_pairing(&phi, &one, 1.0)?;
    let oracle = GaussKronrod::with_tol(1e-12)
        .integrate_panels(0.0, t, 16, |s: f64| if s > 0.0 && s < t { k.eval(t, s).unwrap_or(f64::NAN) } else { 0.0 })
        .value;
    Ok(((lhs - oracle).abs().max((rhs - oracle).abs()), 1e-6, format!("int K(t,s) ds = {oracle:.8}")))
}

fn duality_polynomial(seed: u64) -> Outcome {
    let k = HurstKernel::new(0.7)?;
    let mut rng = Streams::new(seed).derive("oracle-duality").rng(0);
    let mut poly = || Polynomial::new((0..4).map(|_| standard_normal(&mut rng)).collect());
    let (phi, h) = (Path::Polynomial(poly()), Path::Polynomial(poly()));
    let (lhs, rhs) = k.duality_pairing(&phi, &h, 1.0)?;
    Ok(((lhs - rhs).abs(), 1e-5, format!("sides {lhs:.8} / {rhs:.8}")))
}

fn rkhs(t: f64, s: f64) -> Outcome {
    let k = HurstKernel::new(0.7)?;
    let a = Path::Step(StepPath::indicator(t, 1.0)?);
    let b = Path::Step(StepPath::indicator(s, 1.0)?);
    let got = k.rkhs_inner_product(&a, &b, 1.0)?;
    let want = fbm_covariance(0.7, t, s)?;
    Ok(((got - want).abs(), 1e-4, format!("<1_[0,{t}], 1_[0,{s}]> = {got:.6}")))
}

fn single_mode_norm() -> Outcome {
    let g = GridSpec::new(1, 32, 2.0)?;
    let (a, s) = (c(0.7, -0.4), 1.5);
    let idx = g.slot(3);
    let u = ComplexField::plane_wave(g, idx, a);
    let want = a.norm() * (2.0 * g.l).sqrt() * (1.0 + g.xi_sq(idx)).powf(s / 2.0);
    let got = sobolev_norm(&u, SobolevIndex(s));
    Ok((((got - want) / want).abs(), 1e-12, format!("|u|_H^1.5 = {got:.6}")))
}

fn orthogonal_modes() -> Outcome {
    let g = GridSpec::new(2, 16, PI)?;
    let u = ComplexField::plane_wave(g, g.flatten([g.slot(1), g.slot(2)]), c(1.0, 0.0));
    let v = ComplexField::plane_wave(g, g.flatten([g.slot(-1), g.slot(2)]), c(0.0, 1.0));
    Ok((l2_inner(&u, &v)?.abs(), 1e-12, "d=2 modes (1,2) and (-1,2)".into()))
}

fn group_sign() -> Outcome {
    let g = GridSpec::new(1, 16, PI)?;
    let u = ComplexField::plane_wave(g, g.slot(1), c(1.0, 0.0));
    let d = apply_group(&u, PI).add(&u)?;
    Ok((d.sup_norm(), 1e-12, "U(pi) e^{ix} = -e^{ix}".into()))
}

fn group_scan() -> Outcome {
    let g = GridSpec::new(1, 256, PI)?;
    let mut worst = f64::NEG_INFINITY;
    for i in 0..20 {
        let t = 10f64.powf(-2.0 + 2.0 * i as f64 / 19.0);
        worst = worst.max(group_deviation_norm(&g, 0.5, t)? - group_deviation_bound(0.5, t));
    }
    // Residual is the largest excess of the left side over the bound, floored at 0.
    Ok((worst.max(0.0), f64::MIN_POSITIVE, format!("max lhs - bound = {worst:.3e}")))
}

fn constant_field() -> Outcome {
    let g = GridSpec::new(2, 8, 1.5)?;
    let a = c(0.6, 0.8);
    let (lambda, sigma) = (1.0, 1.5);
    let nl = NonlinearitySpec::kerr(lambda, sigma)?;
    let u = ComplexField::from_fn(g, |_| a);
    let vol = g.volume();
    let m_want = a.norm_sqr() * vol;
    let h_want = -lambda * a.norm().powf(2.0 * sigma + 2.0) * vol / (2.0 * sigma + 2.0);
    let r = ((mass(&u) - m_want) / m_want).abs().max(((hamiltonian(&u, &nl) - h_want) / h_want).abs());
    Ok((r, 1e-10, format!("mass {m_want:.6}, H {h_want:.6}")))
}

fn plane_wave_mass() -> Outcome {
    let g = GridSpec::new(1, 64, 3.0)?;
    let a = c(1.2, 0.5);
    let u = ComplexField::plane_wave(g, g.slot(-5), a);
    let want = a.norm_sqr() * g.volume();
    Ok((((mass(&u) - want) / want).abs(), 1e-12, format!("mass {want:.6}")))
}

fn hs_convergence() -> Outcome {
    // r = 3 sits on the boundary 1 + 2(H + alpha) + d/2 = 3.1 for H=1/2,
    // alpha=0.3, so the check runs at r = 4.
    let a = build_correlation(GridSpec::new(1, 256, PI)?, 4.0, 0.5, 0.3)?;
    let b = build_correlation(GridSpec::new(1, 512, PI)?, 4.0, 0.5, 0.3)?;
    let rel = (b.hs_norm - a.hs_norm).abs() / b.hs_norm;
    Ok((rel, 1e-3, format!("HS norm {:.6}, tail ratio {:.2e}", b.hs_norm, b.tail_ratio)))
}

fn brownian_mode_variance(reps: usize, seed: u64) -> Outcome {
    let grid = GridSpec::new(1, 8, PI)?;
    let spec = build_correlation(grid, 6.0, 0.5, 0.3)?.truncated(3);
    let k = HurstKernel::new(0.5)?;
    let tg = TimeGrid::new(1.0, 4)?;
    let l = build_l_refined(&spec, &k, &tg, 2)?;
    let draws = l.sample_replicates(reps, seed);
    let mut worst = 0.0_f64;
    for (i, m) in l.modes.iter().enumerate() {
        for kk in [2, 4] {
            let target = m.phi * m.phi * tg.point(kk);
            let re: Vec<f64> = draws.iter().map(|d| d[i][kk].re).collect();
            worst = worst.max((variance(&re) - target).abs() / (target * (2.0 / (reps - 1) as f64).sqrt()));
        }
    }
    Ok((worst, 4.0, format!("{reps} draws, 3 modes")))
}

fn oracle_spec(h: f64, modes: usize) -> Result<crate::noise::CorrelationSpec> {
    Ok(build_correlation(GridSpec::new(1, 8, PI / 2.0)?, 8.0, h, 0.3)?.truncated(modes))
}

fn q_factorization() -> Outcome {
    let spec = oracle_spec(0.7, 4)?;
    let k = HurstKernel::new(0.7)?;
    let tg = TimeGrid::new(1.0, 8)?;
    let q = build_q(&spec, &k, &tg)?;
    let l = build_l(&spec, &k, &tg)?;
    Ok((verify_factorization(&q, &l)?, 1e-10, "n=8, 4 modes, H=0.7".into()))
}

fn sampler_covariance(draws: usize, seed: u64) -> Outcome {
    let spec = oracle_spec(0.7, 4)?;
    let k = HurstKernel::new(0.7)?;
    let tg = TimeGrid::new(1.0, 8)?;
    let sigma = real_covariance(&build_q(&spec, &k, &tg)?);
    let l = build_l_refined(&spec, &k, &tg, 16)?;
    let xs: Vec<Vec<f64>> = l.sample_replicates(draws, seed).iter().map(real_vector).collect();
    let n = draws as f64;
    let mut worst = 0.0_f64;
    for a in 0..sigma.nrows() {
        for b in 0..=a {
            let m = xs.iter().map(|x| x[a] * x[b]).sum::<f64>() / n;
            let s = sigma[(a, b)];
            worst = worst.max((m - s).abs() / ((sigma[(a, a)] * sigma[(b, b)] + s * s) / n).sqrt());
        }
    }
    Ok((worst, 5.0, format!("{draws} draws, 64x64 real covariance")))
}

fn rate_row_space(seed: u64) -> Outcome {
    let spec = oracle_spec(0.7, 3)?;
    let k = HurstKernel::new(0.7)?;
    let tg = TimeGrid::new(1.0, 5)?;
    let l = build_l(&spec, &k, &tg)?;
    let mut rng = Streams::new(seed).derive("oracle-rate").rng(0);
    let values = (0..3)
        .map(|_| (0..5).map(|_| c(standard_normal(&mut rng), standard_normal(&mut rng))).collect())
        .collect();
    let h0 = Control::new(tg, l.mode_indices(), values)?;
    let r = gaussian_rate(&l, &l.apply_path(&h0)?)?;
    // Square invertible blocks: every h0 lies in the row space, so equality holds.
    let rel = (r.rate - h0.energy()).abs() / h0.energy();
    let excess = (r.rate - h0.energy()).max(0.0) / h0.energy();
    Ok((rel.max(excess), 1e-8, format!("rate {:.6} vs 1/2|h0|^2 {:.6}", r.rate, h0.energy())))
}

fn saturated_limit() -> Outcome {
    let g = GridSpec::new(1, 64, 4.0)?;
    let kerr = NonlinearitySpec::kerr(1.0, 0.5)?;
    let sat = NonlinearitySpec::saturated(1.0, 0.5, 1e-6)?;
    let u = ComplexField::from_fn(g, |x| c(2.0 * (-x[0] * x[0]).exp(), 0.0));
    let d = evaluate_nonlinearity(&kerr, &u)?.sub(&evaluate_nonlinearity(&sat, &u)?)?;
    Ok((d.sup_norm(), 1e-5, "kappa=1e-6, sigma=1/2, |u| <= 2".into()))
}

fn zero_forcing(u0: &ComplexField, cfg: &SolverConfig) -> ConvolutionPath {
    ConvolutionPath::zero(*u0.grid(), cfg.timegrid, 0.5)
}

fn plane_wave_solution() -> Outcome {
    let g = GridSpec::new(1, 64, PI)?;
    let (a, k) = (0.8, 3i64);
    let nl = NonlinearitySpec::kerr(1.0, 1.0)?;
    let u0 = ComplexField::plane_wave(g, g.slot(k), c(a, 0.0));
    let cfg = SolverConfig::new(1.0, 1e-3, 1e6, &u0)?;
    let traj = solve_mild(&u0, &nl, &zero_forcing(&u0, &cfg), 0.0, &cfg)?;
    let omega = (k * k) as f64 - a * a;
    let exact = u0.scale(Complex64::from_polar(1.0, omega));
    let end = traj.terminal().ok_or_else(|| Error::domain("plane wave reached the cemetery"))?;
    Ok((sobolev_norm(&end.sub(&exact)?, SobolevIndex::L2), 1e-6, "T=1, dt=1e-3".into()))
}

fn blowup_run(lambda: f64) -> Result<crate::solver::Trajectory> {
    let g = GridSpec::new(1, 4096, 4.0)?;
    let u0 = ComplexField::from_fn(g, |x| c(3.0 * (-x[0] * x[0]).exp(), 0.0));
    let nl = NonlinearitySpec::kerr(lambda, 2.0)?;
    let cfg = SolverConfig::new(0.1, 1e-3, 1e3, &u0)?;
    solve_mild(&u0, &nl, &zero_forcing(&u0, &cfg), 0.0, &cfg)
}

fn defocusing_bounded() -> Outcome {
    let t = blowup_run(-1.0)?;
    let hit = if t.cemetery_index().is_some() { 1.0 } else { 0.0 };
    Ok((hit, 0.5, format!("blow-up time {}", t.blowup_time())))
}

fn focusing_blowup() -> Outcome {
    let t = blowup_run(1.0)?;
    let miss = if t.cemetery_index().is_some() { 0.0 } else { 1.0 };
    Ok((miss, 0.5, format!("blow-up time {}", t.blowup_time())))
}

fn linear_skeleton() -> Outcome {
    let spec = oracle_spec(0.7, 3)?;
    let k = HurstKernel::new(0.7)?;
    let tg = TimeGrid::new(1.0, 8)?;
    let l = build_l(&spec, &k, &tg)?;
    let h = Control::new(
        tg,
        l.mode_indices(),
        (0..3)
            .map(|i| (0..8).map(|j| c((i + j) as f64 * 0.1, -0.05 * j as f64)).collect())
            .collect(),
    )?;
    let u0 = ComplexField::zeros(spec.grid);
    let cfg = SolverConfig::with_grid(tg, 1e6, &u0)?;
    let s = solve_skeleton(&u0, &h, &NonlinearitySpec::linear(), &l, &cfg)?;
    let lh = l.apply_path(&h)?;
    let mut worst = 0.0_f64;
    for (kk, f) in lh.fields.iter().enumerate() {
        let got = s.state(kk).ok_or_else(|| Error::domain("skeleton reached the cemetery"))?;
        worst = worst.max(got.sub(&f.scale(c(0.0, -1.0)))?.l2_norm_physical());
    }
    Ok((worst, 1e-10, "S(0,h) = -i L h".into()))
}

/// Linear problem on the 8-point grid with a terminal `L^2` ball event.
fn linear_problem(modes: usize, steps: usize, delta: f64) -> Result<LdpProblem> {
    let spec = oracle_spec(0.7, modes)?;
    let k = HurstKernel::new(0.7)?;
    let tg = TimeGrid::new(1.0, steps)?;
    let op = build_l_refined(&spec, &k, &tg, 4)?;
    let u0 = ComplexField::zeros(spec.grid);
    let cfg = SolverConfig::with_grid(tg, 1e6, &u0)?;
    let event = EventSpec {
        kind: EventKind::TerminalBallExit,
        threshold: delta,
        norm: SobolevIndex::L2,
    };
    LdpProblem::new(u0, NonlinearitySpec::linear(), cfg, op, event)
}

/// `P(sum_j a_j E_j > x)` for independent unit exponentials, with one
/// distinguished weight `a0` and the rest equal to `a1` (multiplicity `m`).
fn exponential_mixture_tail(a0: f64, a1: f64, m: usize, x: f64) -> f64 {
    // Y ~ Gamma(m, a1) written as Y = a1 u; the u-density is negligible past m + 60.
    let lg = ln_gamma(m as f64);
    let surv = (0..m).map(|j| (x / a1).powi(j as i32) / (1..=j).product::<usize>() as f64).sum::<f64>() * (-x / a1).exp();
    let upper = (x / a1).min(m as f64 + 60.0);
    let conv = GaussKronrod::with_tol(1e-12)
        .integrate(0.0, upper, |u: f64| {
            if u > 0.0 {
                ((m as f64 - 1.0) * u.ln() - u - lg - (x - a1 * u) / a0).exp()
            } else {
                0.0
            }
        })
        .value;
    surv + conv
}

fn terminal_tail(reps: usize, seed: u64) -> Outcome {
    let (delta, eps) = (0.7, 0.25);
    let p = linear_problem(3, 8, delta)?;
    let spec = oracle_spec(0.7, 3)?;
    let k = HurstKernel::new(0.7)?;
    let q = build_q(&spec, &k, &p.cfg.timegrid)?;
    // |u(T)|^2 = eps sum_j |Z_j(T)|^2 with |Z_j(T)|^2 exponential of mean 2 Q_j(T,T).
    let a: Vec<f64> = q.iter().map(|b| 2.0 * eps * b[(7, 7)].re).collect();
    if (a[1] - a[2]).abs() > 1e-9 * a[1] {
        return Err(Error::domain("paired modes should share their variance"));
    }
    let oracle = exponential_mixture_tail(a[0], a[1], 2, delta * delta);
    let est = estimate_event_probability(&p, eps, reps, seed)?;
    let inside = est.ci_lo <= oracle && oracle <= est.ci_hi;
    Ok((
        if inside { 0.0 } else { (est.p_hat - oracle).abs() },
        f64::MIN_POSITIVE,
        format!("p_hat {:.4} in [{:.4}, {:.4}], Gaussian tail {oracle:.4}", est.p_hat, est.ci_lo, est.ci_hi),
    ))
}

fn ldp_triangle(reps: usize, seed: u64) -> Outcome {
    let p = linear_problem(8, 16, 0.7)?;
    let (gauss, _) = terminal_ball_rate(&p.operator, 0.7, SobolevIndex::L2)?;
    let ladder = [0.25, 0.16, 0.09, 0.04]
        .iter()
        .map(|&eps| estimate_event_probability(&p, eps, reps, seed))
        .collect::<Result<Vec<_>>>()?;
    let monotone = ladder.windows(2).all(|w| w[1].ci_lo <= w[0].ci_hi);
    let slope = ldp_slope(&ladder)?;
    let basis = ControlBasis::new(p.operator.mode_indices(), 4)?;
    let opt = minimize_rate(&p, &basis, OptimizerBudget::default(), seed)?;
    let rel = |a: f64, b: f64| (a - b).abs() / a.min(b);
    let tri = rel(slope.rate, gauss).max(rel(slope.rate, opt.rate)).max(rel(gauss, opt.rate));
    // Scaled so that one number covers the 25% triangle and the 5% optimizer gap.
    let opt_gap = rel(opt.rate, gauss);
    let ok = monotone && opt.feasible && slope.rate_lower_95() > 0.0;
    let residual = if ok { (tri / 0.25).max(opt_gap / 0.05) } else { f64::INFINITY };
    Ok((
        residual,
        1.0,
        format!(
            "slope {:.4}, pseudo-inverse {gauss:.4}, optimizer {:.4} (gap {:.2}%), monotone {monotone}",
            slope.rate,
            opt.rate,
            100.0 * opt_gap
        ),
    ))
}

fn optimizer_doubling() -> Outcome {
    let p1 = linear_problem(4, 8, 0.4)?;
    let p2 = linear_problem(4, 8, 0.8)?;
    let basis = ControlBasis::new(p1.operator.mode_indices(), 4)?;
    let r1 = minimize_rate(&p1, &basis, OptimizerBudget::default(), 0)?;
    let r2 = minimize_rate(&p2, &basis, OptimizerBudget::default(), 0)?;
    let ok = r1.feasible && r2.feasible && r2.rate > r1.rate;
    Ok((
        if ok { (r2.rate / r1.rate - 4.0).abs() / 4.0 } else { f64::INFINITY },
        0.05,
        format!("I*(0.4)={:.4}, I*(0.8)={:.4}", r1.rate, r2.rate),
    ))
}

fn support_enrichment(seed: u64) -> Outcome {
    let spec = oracle_spec(0.7, 4)?;
    let k = HurstKernel::new(0.7)?;
    let tg = TimeGrid::new(1.0, 16)?;
    let op = build_l_refined(&spec, &k, &tg, 2)?;
    let u0 = ComplexField::from_fn(spec.grid, |x| c(0.5 * (2.0 * x[0]).cos(), 0.0));
    let cfg = SolverConfig::with_grid(tg, 1e6, &u0)?;
    let event = EventSpec {
        kind: EventKind::SupNormExceed,
        threshold: 1.0,
        norm: SobolevIndex::H1,
    };
    let p = LdpProblem::new(u0, NonlinearitySpec::kerr(-1.0, 1.0)?, cfg, op.clone(), event)?;
    let streams = Streams::new(seed).derive("oracle-support");
    let samples = (0..50).map(|i| p.sample(1.0, &mut streams.rng(i))).collect::<Result<Vec<_>>>()?;
    let skeletons = random_controls(&op, 64, seed)
        .iter()
        .map(|h| p.skeleton(h))
        .collect::<Result<Vec<_>>>()?;
    let d8 = support_distance(&samples, &skeletons[..8]);
    let d64 = support_distance(&samples, &skeletons);
    // Ratio below one means a strict decrease.
    Ok((d64 / d8, 1.0, format!("median distance {d8:.4} -> {d64:.4}")))
}

fn holder_fbm(seed: u64) -> Outcome {
    let tg = TimeGrid::new(1.0, 1 << 14)?;
    let s = CirculantSampler::new(0.7, &tg)?.ok_or_else(|| Error::domain("circulant embedding not PSD"))?;
    let r = holder_exponent(&s.sample_path(&mut Streams::new(seed).derive("oracle-holder").rng(0)))?;
    Ok(((r.exponent - 0.7).abs(), 0.08, format!("H_hat {:.3}, R^2 {:.4}", r.exponent, r.r_squared)))
}

fn holder_convolution(paths: usize, seed: u64) -> Outcome {
    let spec = build_correlation(GridSpec::new(1, 8, PI / 2.0)?, 8.0, 0.7, 0.3)?;
    let tg = TimeGrid::new(1.0, 1 << 10)?;
    let sampler = IncrementSampler::new(&spec, &tg)?;
    let mut lowest = f64::INFINITY;
    for rep in 0..paths {
        let r = holder_exponent_fields(&sampler.sample_path(seed, rep as u64).fields, SobolevIndex::H1)?;
        lowest = lowest.min(if r.degenerate { 0.0 } else { r.exponent });
    }
    // Residual is the shortfall below 0.6.
    Ok(((0.6 - lowest).max(0.0), f64::MIN_POSITIVE, format!("lowest exponent {lowest:.3} over {paths} paths")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixture_tail_closed_forms() {
        // Two distinct exponentials: the hypoexponential tail.
        let (a0, a1, x) = (2.0_f64, 0.5_f64, 1.5_f64);
        let want = (a0 * (-x / a0).exp() - a1 * (-x / a1).exp()) / (a0 - a1);
        assert!((exponential_mixture_tail(a0, a1, 1, x) - want).abs() < 1e-10);
        // Equal weights: Gamma(3) survival.
        let x: f64 = 2.0;
        let want = (1.0 + x + x * x / 2.0) * (-x).exp();
        assert!((exponential_mixture_tail(1.0 + 1e-7, 1.0, 2, x) - want).abs() < 1e-5);
        // Vanishing pair weight leaves the single exponential.
        let p = exponential_mixture_tail(0.5, 1e-7, 2, 0.49);
        assert!((p - (-0.98f64).exp()).abs() < 1e-5, "{p}");
    }
}
