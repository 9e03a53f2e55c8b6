//! Volterra kernel of fractional Brownian motion and the operators built on it.
//!
//! `beta^H(t) = int_0^t K(t, s) d beta(s)` with
//!
//! ```text
//! K(t, s) = c_H (t - s)^{H - 1/2}
//!         + c_H (1/2 - H) int_s^t (u - s)^{H - 3/2} (1 - (s/u)^{1/2 - H}) du
//! ```
//!
//! The interior integral is evaluated after the substitution `u = s + v^2`,
//! which turns the `(u - s)^{H - 3/2}` endpoint factor into `v^{2H - 2}` and,
//! together with the vanishing bracket, leaves an integrand that behaves like
//! `v^{2H}` at the origin. Internally everything is parametrised by
//! `(s, gap)` with `t = s + gap` so that points within an ulp of the diagonal
//! are still evaluated accurately.

use num_complex::Complex64;
use statrs::function::beta::beta;
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::path::{segment_points, Path, StepPath};
use crate::quad::{GaussKronrod, QuadValue, TanhSinh};

/// Relative tolerance of the quadratures inside kernel evaluations.
/// Absolute floor for `K_T^*` integrals, which vanish as the gap closes.
const KT_STAR_ABS_TOL: f64 = 1e-17;

const KERNEL_TOL: f64 = 1e-13;

/// `c_H = (2H Gamma(3/2 - H) / (Gamma(H + 1/2) Gamma(2 - 2H)))^{1/2}`.
pub fn normalization_constant(hurst: f64) -> Result<f64> {
    check_hurst(hurst)?;
    if hurst == 0.5 {
        // Every gamma argument equals one.
        return Ok(1.0);
    }
    let num = 2.0 * hurst * gamma(1.5 - hurst);
    let den = gamma(hurst + 0.5) * gamma(2.0 - 2.0 * hurst);
    Ok((num / den).sqrt())
}

fn check_hurst(hurst: f64) -> Result<()> {
    if hurst > 0.0 && hurst < 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("H must lie in (0,1), got {hurst}")))
    }
}

/// `E[beta^H(t) beta^H(s)] = (s^{2H} + t^{2H} - |t - s|^{2H}) / 2`.
pub fn fbm_covariance(hurst: f64, t: f64, s: f64) -> Result<f64> {
    check_hurst(hurst)?;
    if t < 0.0 || s < 0.0 {
        return Err(Error::domain("fbm covariance needs t, s >= 0"));
    }
    let two_h = 2.0 * hurst;
    Ok(0.5 * (s.powf(two_h) + t.powf(two_h) - (t - s).abs().powf(two_h)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HurstKernel {
    hurst: f64,
    c_h: f64,
}

impl HurstKernel {
    pub fn new(hurst: f64) -> Result<Self> {
        Ok(Self {
            hurst,
            c_h: normalization_constant(hurst)?,
        })
    }

    pub fn hurst(&self) -> f64 {
        self.hurst
    }

    pub fn c_h(&self) -> f64 {
        self.c_h
    }

    pub fn is_brownian(&self) -> bool {
        self.hurst == 0.5
    }

    /// `K^H(t, s)`; zero for `s > t`.
    pub fn eval(&self, t: f64, s: f64) -> Result<f64> {
        if !(s > 0.0) {
            return Err(Error::domain(format!("kernel needs s > 0, got {s}")));
        }
        if t < 0.0 {
            return Err(Error::domain(format!("kernel needs t >= 0, got {t}")));
        }
        if s > t {
            return Ok(0.0);
        }
        Ok(self.eval_gap(s, t - s))
    }

    /// `K(s + gap, s)` for `s > 0`, `gap >= 0`.
    pub fn eval_gap(&self, s: f64, gap: f64) -> f64 {
        let h = self.hurst;
        if h == 0.5 {
            return 1.0;
        }
        if gap == 0.0 {
            return if h > 0.5 { 0.0 } else { f64::INFINITY };
        }
        let ts = TanhSinh::with_tol(KERNEL_TOL);
        let inner = ts.integrate(gap.sqrt(), |v: f64, _| self.interior(s, v)).value;
        self.c_h * (gap.powf(h - 0.5) + (0.5 - h) * inner)
    }

    /// Interior integrand in the `v` variable:
    /// `2 v^{2H-2} (1 - (s / (s + v^2))^{1/2 - H})`, written as
    /// `2 v^{2H} / s * bracket / x` with `x = v^2 / s` so that the vanishing
    /// bracket never meets an overflowing power.
    fn interior(&self, s: f64, v: f64) -> f64 {
        let (h, a) = (self.hurst, 0.5 - self.hurst);
        let x = v * v / s;
        let bracket_over_x = if x < 1e-12 {
            a * (1.0 - 0.5 * (a + 1.0) * x)
        } else {
            -(-a * x.ln_1p()).exp_m1() / x
        };
        2.0 * v.powf(2.0 * h) / s * bracket_over_x
    }

    /// `K(s + gap_k, s)` for an increasing list of gaps. The interior integral
    /// is accumulated piece by piece, so a long column costs little more
    /// than its first entry. Accurate to roughly `1e-10` relative.
    pub fn eval_column(&self, s: f64, gaps: &[f64]) -> Vec<f64> {
        let h = self.hurst;
        if h == 0.5 {
            return vec![1.0; gaps.len()];
        }
        let gk = GaussKronrod::with_tol(1e-10).abs_tol(1e-300);
        let mut inner = 0.0;
        let mut v_prev = 0.0;
        let mut out = Vec::with_capacity(gaps.len());
        for (k, &gap) in gaps.iter().enumerate() {
            if gap <= 0.0 {
                out.push(self.eval_gap(s, gap.max(0.0)));
                continue;
            }
            let v = gap.sqrt();
            inner += if k == 0 || v_prev == 0.0 {
                TanhSinh::with_tol(1e-10)
                    .integrate(v, |x: f64, _| self.interior(s, x))
                    .value
            } else {
                gk.integrate(v_prev, v, |x: f64| self.interior(s, x)).value
            };
            v_prev = v;
            out.push(self.c_h * (gap.powf(h - 0.5) + (0.5 - h) * inner));
        }
        out
    }

    /// `dK/dt (t, s) = c_H (H - 1/2) (t - s)^{H - 3/2} (s / t)^{1/2 - H}`.
    ///
    /// The sign follows `H - 1/2` (positive for long memory), which is what
    /// differentiating the kernel formula in `t` gives.
    pub fn time_derivative(&self, t: f64, s: f64) -> Result<f64> {
        if !(s > 0.0) || !(s < t) {
            return Err(Error::domain(format!(
                "kernel time derivative needs 0 < s < t, got t={t}, s={s}"
            )));
        }
        Ok(self.derivative_gap(s, t - s))
    }

    pub fn derivative_gap(&self, s: f64, gap: f64) -> f64 {
        let h = self.hurst;
        if h == 0.5 {
            return 0.0;
        }
        // (s / (s + gap))^{1/2 - H} written through log1p for small gaps.
        let ratio = (-(0.5 - h) * (gap / s).ln_1p()).exp();
        self.c_h * (h - 0.5) * gap.powf(h - 1.5) * ratio
    }

    /// `int_0^{t ^ s} K(t, r) K(s, r) dr`, the kernel route to the fBm covariance.
    pub fn kernel_covariance(&self, t: f64, s: f64) -> f64 {
        let m = t.min(s);
        if m <= 0.0 {
            return 0.0;
        }
        let (gt, gs) = (t - m, s - m);
        TanhSinh::with_tol(1e-11)
            .integrate(m, |r: f64, dr: f64| self.eval_gap(r, gt + dr) * self.eval_gap(r, gs + dr))
            .value
    }

    /// `(K_T^* g)(s) = g(s) K(T, s) + int_s^T (g(r) - g(s)) K(dr, s)` with the
    /// integrand given as a function of the offset: `offset(w) = g(s + w)`,
    /// `gap = T - s`. `frequency` is a hint for oscillatory integrands
    /// (radians per unit time); zero means smooth.
    pub fn kt_star_offset<V, G>(&self, s: f64, gap: f64, offset: G, frequency: f64) -> Result<V>
    where
        V: QuadValue,
        G: Fn(f64) -> V,
    {
        let g0 = offset(0.0);
        if self.is_brownian() {
            return Ok(g0);
        }
        if gap <= 0.0 {
            // T = s: K(s, s) is 0 for H > 1/2 and the integral is empty.
            return if self.hurst > 0.5 {
                Ok(V::zero())
            } else {
                Err(Error::domain("K_T^* at s = T is singular for H < 1/2"))
            };
        }
        let head = g0 * self.eval_gap(s, gap);
        let integrand = |w: f64| {
            let diff = offset(w) - g0;
            if diff.magnitude() == 0.0 {
                V::zero()
            } else {
                diff * self.derivative_gap(s, w)
            }
        };
        let oscillations = frequency.abs() * gap / std::f64::consts::PI;
        let integral = if oscillations <= 2.0 {
            TanhSinh::with_tol(KERNEL_TOL).abs_tol(KT_STAR_ABS_TOL)
                .integrate(gap, |w: f64, _| integrand(w))
                .require("K_T^* integral")?
        } else {
            // Singular first panel with tanh-sinh, oscillatory remainder with Gauss-Kronrod.
            let first = (gap / oscillations).min(gap);
            let a = TanhSinh::with_tol(KERNEL_TOL).abs_tol(KT_STAR_ABS_TOL)
                .integrate(first, |w: f64, _| integrand(w))
                .require("K_T^* singular panel")?;
            let panels = (oscillations.ceil() as usize).clamp(1, 4096);
            let b = GaussKronrod::with_tol(KERNEL_TOL).abs_tol(KT_STAR_ABS_TOL)
                .integrate_panels(first, gap, panels, integrand)
                .require("K_T^* oscillatory panels")?;
            a + b
        };
        Ok(head + integral)
    }

    /// `(K_T^* phi)(s)` for a scalar path. Step paths use exact telescoping of
    /// `K(dt, s)` across their jumps; polynomials go through quadrature.
    pub fn apply_kt_star(&self, phi: &Path, horizon: f64, s: f64) -> Result<f64> {
        if !(s > 0.0 && s < horizon) {
            return Err(Error::domain(format!("K_T^* needs 0 < s < T, got s={s}, T={horizon}")));
        }
        match phi {
            Path::Step(step) => Ok(self.kt_star_step(step, horizon, s)),
            Path::Polynomial(p) => self.kt_star_offset(s, horizon - s, |w| p.value(s + w), 0.0),
        }
    }

    fn kt_star_step(&self, step: &StepPath, horizon: f64, s: f64) -> f64 {
        let at_s = step.value(s);
        let breaks = step.breaks();
        let values = step.values();
        let mut acc = at_s * self.eval_gap(s, horizon - s);
        for i in 0..values.len() {
            let (a, b) = (breaks[i], breaks[i + 1].min(horizon));
            if a <= s || a >= horizon {
                continue;
            }
            let jump = values[i] - at_s;
            if jump != 0.0 {
                acc += jump * (self.eval_gap(s, b - s) - self.eval_gap(s, a - s));
            }
        }
        acc
    }

    /// `(K h)(t) = int_0^t K(t, s) h(s) ds`.
    pub fn volterra_apply(&self, h: &Path, t: f64) -> Result<f64> {
        if t <= 0.0 {
            return Ok(0.0);
        }
        let pts: Vec<f64> = segment_points(t, &[h])
            .into_iter()
            .filter(|&p| p <= t)
            .collect();
        let ts = TanhSinh::with_tol(1e-12);
        let mut total = 0.0;
        for w in pts.windows(2) {
            let (a, b) = (w[0], w[1]);
            let tail = t - b;
            total += ts
                .integrate(b - a, |dl: f64, dr: f64| {
                    let s = a + dl;
                    self.eval_gap(s, tail + dr) * h.value(s)
                })
                .require("Volterra integral")?;
        }
        Ok(total)
    }

    /// Both sides of `int_0^T (K_T^* phi)(t) h(t) dt = int_0^T phi(t) (K h)(dt)`.
    pub fn duality_pairing(&self, phi: &Path, h: &Path, horizon: f64) -> Result<(f64, f64)> {
        if phi.is_zero() || h.is_zero() {
            return Ok((0.0, 0.0));
        }
        let pts = segment_points(horizon, &[phi, h]);
        let ts = TanhSinh::with_tol(1e-10);
        let mut lhs = 0.0;
        for w in pts.windows(2) {
            let (a, b) = (w[0], w[1]);
            let mut err = None;
            let v = ts
                .integrate(b - a, |dl: f64, dr: f64| {
                    let t = if dl <= dr { a + dl } else { b - dr };
                    // Nodes that round onto an endpoint carry negligible weight.
                    if !(t > 0.0 && t < horizon) {
                        return 0.0;
                    }
                    match self.apply_kt_star(phi, horizon, t) {
                        Ok(k) => k * h.value(t),
                        Err(e) => {
                            err.get_or_insert(e);
                            0.0
                        }
                    }
                })
                .require("duality left side")?;
            if let Some(e) = err {
                return Err(e);
            }
            lhs += v;
        }

        let rhs = match phi {
            Path::Step(step) => {
                let mut acc = 0.0;
                let breaks = step.breaks();
                for (i, &v) in step.values().iter().enumerate() {
                    if v != 0.0 {
                        acc += v * (self.volterra_apply(h, breaks[i + 1])? - self.volterra_apply(h, breaks[i])?);
                    }
                }
                acc
            }
            Path::Polynomial(p) => {
                // Integration by parts: phi(T) (Kh)(T) - int phi'(t) (Kh)(t) dt, (Kh)(0) = 0.
                let dp = p.derivative();
                let mut err = None;
                let inner = ts
                    .integrate(horizon, |t: f64, _| match self.volterra_apply(h, t) {
                        Ok(k) => dp.value(t) * k,
                        Err(e) => {
                            err.get_or_insert(e);
                            0.0
                        }
                    })
                    .require("duality right side")?;
                if let Some(e) = err {
                    return Err(e);
                }
                p.value(horizon) * self.volterra_apply(h, horizon)? - inner
            }
        };
        Ok((lhs, rhs))
    }

    /// `<phi, psi>_H = c_H^2 (H - 1/2)^2 B(2 - 2H, H - 1/2) int int phi(u) psi(v) |u - v|^{2H - 2}`
    /// for `H > 1/2`.
    pub fn rkhs_inner_product(&self, phi: &Path, psi: &Path, horizon: f64) -> Result<f64> {
        let h = self.hurst;
        if h <= 0.5 {
            return Err(Error::domain(format!(
                "RKHS double-integral form needs H > 1/2, got {h}"
            )));
        }
        let constant = self.c_h.powi(2) * (h - 0.5).powi(2) * beta(2.0 - 2.0 * h, h - 0.5);
        let pts = segment_points(horizon, &[phi, psi]);
        let p = 1.0 / (2.0 * h - 1.0);
        let gk = GaussKronrod::with_tol(1e-12);
        // int_0^T psi(v) |u - v|^{2H-2} dv, split at u and at psi's jumps; on each
        // piece substitute x = |u - v|^{2H-1}, which makes the weight constant.
        let inner = |u: f64| -> f64 {
            let mut acc = 0.0;
            for w in pts.windows(2) {
                let (a, b) = (w[0], w[1]);
                let mut piece = |lo: f64, hi: f64, sign: f64| {
                    // v = u + sign * x^p, |u - v| from lo to hi
                    if hi > lo {
                        acc += p * gk
                            .integrate(lo.powf(1.0 / p), hi.powf(1.0 / p), |x: f64| {
                                psi.value(u + sign * x.powf(p))
                            })
                            .value;
                    }
                };
                if u <= a {
                    piece(a - u, b - u, 1.0);
                } else if u >= b {
                    piece(u - b, u - a, -1.0);
                } else {
                    piece(0.0, u - a, -1.0);
                    piece(0.0, b - u, 1.0);
                }
            }
            acc
        };
        let ts = TanhSinh::with_tol(1e-11);
        let mut total = 0.0;
        for w in pts.windows(2) {
            let (a, b) = (w[0], w[1]);
            let v = ts
                .integrate(b - a, |dl: f64, _| {
                    let u = a + dl;
                    let f = phi.value(u);
                    if f == 0.0 {
                        0.0
                    } else {
                        f * inner(u)
                    }
                })
                .require("RKHS outer integral")?;
            total += v;
        }
        Ok(constant * total)
    }
}

/// `K_t^*` applied to `r -> exp(i omega (t - r))` at `s`, the per-mode integrand
/// of the stochastic convolution. `gap = t - s`.
pub fn kt_star_group(kernel: &HurstKernel, omega: f64, s: f64, gap: f64) -> Result<Complex64> {
    kernel.kt_star_offset(
        s,
        gap,
        |w: f64| Complex64::from_polar(1.0, omega * (gap - w)),
        omega,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path::Polynomial;

    #[test]
    fn normalization_values() {
        assert_eq!(normalization_constant(0.5).unwrap(), 1.0);
        // Gamma-expression oracle evaluated independently via ln-gamma.
        let oracle = |h: f64| {
            use statrs::function::gamma::ln_gamma;
            ((2.0 * h).ln() + ln_gamma(1.5 - h) - ln_gamma(h + 0.5) - ln_gamma(2.0 - 2.0 * h))
                .mul_add(0.5, 0.0)
                .exp()
        };
        for h in [0.25, 0.75] {
            assert!((normalization_constant(h).unwrap() - oracle(h)).abs() < 1e-12);
        }
        assert!((normalization_constant(0.75).unwrap() - 1.0697).abs() < 1e-4);
        assert!((normalization_constant(0.25).unwrap() - 0.6460).abs() < 1e-4);
        assert!(normalization_constant(1.0).is_err());
        assert!(normalization_constant(0.0).is_err());
    }

    #[test]
    fn brownian_kernel_is_one() {
        let k = HurstKernel::new(0.5).unwrap();
        assert_eq!(k.eval(0.8, 0.3).unwrap(), 1.0);
        assert_eq!(k.time_derivative(1.0, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn kernel_vanishes_above_diagonal() {
        for h in [0.2, 0.5, 0.8] {
            let k = HurstKernel::new(h).unwrap();
            assert_eq!(k.eval(0.4, 0.7).unwrap(), 0.0);
        }
        assert_eq!(HurstKernel::new(0.7).unwrap().eval(0.5, 0.5).unwrap(), 0.0);
        assert!(HurstKernel::new(0.7).unwrap().eval(0.5, 0.0).is_err());
    }

    #[test]
    fn kernel_two_quadrature_rules_agree() {
        // Oracle: adaptive Gauss-Kronrod on the original variable u, with the
        // (u - s)^{H - 3/2} endpoint handled by splitting into many panels.
        let h: f64 = 0.7;
        let (t, s) = (1.0, 0.5);
        let k = HurstKernel::new(h).unwrap();
        let c = normalization_constant(h).unwrap();
        let f = |u: f64| (u - s).powf(h - 1.5) * (1.0 - (s / u).powf(0.5 - h));
        let gk = GaussKronrod {
            rel_tol: 1e-14,
            abs_tol: 1e-15,
            max_intervals: 20000,
        };
        let integral = gk.integrate(s, t, f).value;
        let oracle = c * (t - s).powf(h - 0.5) + c * (0.5 - h) * integral;
        let got = k.eval(t, s).unwrap();
        assert!((got - oracle).abs() < 1e-8, "{got} vs {oracle}");
    }

    #[test]
    fn derivative_matches_finite_difference() {
        for h in [0.25, 0.75] {
            let k = HurstKernel::new(h).unwrap();
            let (t, s, step) = (1.0, 0.5, 1e-6);
            let fd = (k.eval(t + step, s).unwrap() - k.eval(t - step, s).unwrap()) / (2.0 * step);
            let d = k.time_derivative(t, s).unwrap();
            assert!(((d - fd) / fd).abs() < 1e-4, "H={h}: {d} vs {fd}");
            assert_eq!(d.signum(), (h - 0.5).signum());
        }
        assert!(HurstKernel::new(0.3).unwrap().time_derivative(1.0, 1.0).is_err());
    }

    #[test]
    fn covariance_formula() {
        assert_eq!(fbm_covariance(0.3, 1.0, 1.0).unwrap(), 1.0);
        assert_eq!(fbm_covariance(0.5, 1.0, 2.0).unwrap(), 1.0);
        let v = fbm_covariance(0.75, 1.0, 3.0).unwrap();
        assert!((v - 0.5 * (1.0 + 3f64.powf(1.5) - 2f64.powf(1.5))).abs() < 1e-15);
        assert!((v - 1.6839).abs() < 5e-5);
    }

    #[test]
    fn kernel_factorizes_covariance() {
        for h in [0.3, 0.7] {
            let k = HurstKernel::new(h).unwrap();
            for (t, s) in [(1.0, 0.5), (0.3, 0.9), (0.7, 0.7)] {
                let got = k.kernel_covariance(t, s);
                let want = fbm_covariance(h, t, s).unwrap();
                assert!((got - want).abs() < 1e-6, "H={h} ({t},{s}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn kt_star_telescoping_cases() {
        let k = HurstKernel::new(0.3).unwrap();
        let ind = Path::Step(StepPath::indicator(0.6, 1.0).unwrap());
        let got = k.apply_kt_star(&ind, 1.0, 0.4).unwrap();
        assert!((got - k.eval(0.6, 0.4).unwrap()).abs() < 1e-12);
        let c = Path::Step(StepPath::constant(2.5, 1.0));
        let got = k.apply_kt_star(&c, 1.0, 0.4).unwrap();
        assert!((got - 2.5 * k.eval(1.0, 0.4).unwrap()).abs() < 1e-12);
        // Constant as a polynomial goes through quadrature.
        let p = Path::Polynomial(Polynomial::new(vec![2.5]));
        assert!((k.apply_kt_star(&p, 1.0, 0.4).unwrap() - got).abs() < 1e-12);
    }

    #[test]
    fn rkhs_matches_covariance() {
        let k = HurstKernel::new(0.7).unwrap();
        let a = Path::Step(StepPath::indicator(0.8, 1.0).unwrap());
        let b = Path::Step(StepPath::indicator(0.3, 1.0).unwrap());
        let aa = k.rkhs_inner_product(&a, &a, 1.0).unwrap();
        assert!((aa - 0.8f64.powf(1.4)).abs() < 1e-4);
        let ab = k.rkhs_inner_product(&a, &b, 1.0).unwrap();
        assert!((ab - fbm_covariance(0.7, 0.8, 0.3).unwrap()).abs() < 1e-4);
        let a2 = Path::Step(StepPath::indicator(0.8, 1.0).unwrap().scaled(2.0));
        let twice = k.rkhs_inner_product(&a2, &b, 1.0).unwrap();
        assert!((twice - 2.0 * ab).abs() < 1e-12);
        assert!(HurstKernel::new(0.5).unwrap().rkhs_inner_product(&a, &a, 1.0).is_err());
    }

    #[test]
    fn kt_star_group_reduces_to_kernel_at_zero_frequency() {
        let k = HurstKernel::new(0.7).unwrap();
        let z = kt_star_group(&k, 0.0, 0.3, 0.5).unwrap();
        assert!((z.re - k.eval(0.8, 0.3).unwrap()).abs() < 1e-13);
        assert_eq!(z.im, 0.0);
    }
}
