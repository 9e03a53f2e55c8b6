//! One-dimensional quadrature.
//!
//! Two independent rules live here:
//!
//! * [`TanhSinh`] (double-exponential) handles integrable algebraic
//!   singularities at either endpoint. The integrand receives the distance to
//!   *both* endpoints, so callers can evaluate factors such as `(t - s)^a`
//!   without cancellation when a node sits within an ulp of the endpoint.
//! * [`GaussKronrod`] is the classic adaptive 7/15-point rule for smooth or
//!   oscillatory integrands.
//!
//! Both return an [`Estimate`] with an error estimate; callers decide whether
//! to escalate a non-converged result to an error.

use std::collections::BinaryHeap;
use std::ops::{Add, Mul, Sub};

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Values a quadrature rule can accumulate.
pub trait QuadValue:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<f64, Output = Self>
{
    fn zero() -> Self;
    fn magnitude(&self) -> f64;
}

impl QuadValue for f64 {
    fn zero() -> Self {
        0.0
    }
    fn magnitude(&self) -> f64 {
        self.abs()
    }
}

impl QuadValue for Complex64 {
    fn zero() -> Self {
        Complex64::new(0.0, 0.0)
    }
    fn magnitude(&self) -> f64 {
        self.norm()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Estimate<V> {
    pub value: V,
    pub error: f64,
    pub evals: usize,
    pub converged: bool,
}

impl<V: QuadValue> Estimate<V> {
    /// Promote a non-converged estimate to [`Error::Quadrature`].
    pub fn require(self, context: &str) -> Result<V> {
        if self.converged {
            Ok(self.value)
        } else {
            Err(Error::Quadrature {
                error: self.error,
                context: format!(" ({context})"),
            })
        }
    }
}

/// Tanh-sinh rule on `[0, len]`.
#[derive(Clone, Copy, Debug)]
pub struct TanhSinh {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_level: usize,
}

impl Default for TanhSinh {
    fn default() -> Self {
        Self {
            rel_tol: 1e-12,
            abs_tol: 1e-300,
            max_level: 8,
        }
    }
}

const HALF_PI: f64 = std::f64::consts::FRAC_PI_2;
const T_LIMIT: f64 = 6.5;

impl TanhSinh {
    pub fn with_tol(rel_tol: f64) -> Self {
        Self {
            rel_tol,
            ..Self::default()
        }
    }

    pub fn abs_tol(self, abs_tol: f64) -> Self {
        Self { abs_tol, ..self }
    }

    /// Integrate over `[0, len]`; `f(dl, dr)` gets the distances of the node
    /// from the left and right endpoints (`dl + dr == len` up to rounding).
    pub fn integrate<V, F>(&self, len: f64, mut f: F) -> Estimate<V>
    where
        V: QuadValue,
        F: FnMut(f64, f64) -> V,
    {
        if len <= 0.0 {
            return Estimate {
                value: V::zero(),
                error: 0.0,
                evals: 0,
                converged: true,
            };
        }
        let mut evals = 0usize;
        let mut term = |t: f64, evals: &mut usize| -> Option<V> {
            let y = HALF_PI * t.sinh();
            let e = (-2.0 * y.abs()).exp();
            let near = len * e / (1.0 + e);
            let far = len / (1.0 + e);
            if near <= 0.0 {
                return None;
            }
            let (dl, dr) = if y >= 0.0 { (far, near) } else { (near, far) };
            let w = len * HALF_PI * t.cosh() * 2.0 * e / ((1.0 + e) * (1.0 + e));
            *evals += 1;
            Some(f(dl, dr) * w)
        };

        // Level 0 fixes the truncation on each side.
        let mut sum = term(0.0, &mut evals).unwrap_or_else(V::zero);
        let mut t_right = 0.0;
        let mut t_left = 0.0;
        for side in [1.0f64, -1.0] {
            let mut k = 1.0;
            let mut small = 0;
            while k <= T_LIMIT {
                let Some(v) = term(side * k, &mut evals) else {
                    break;
                };
                sum = sum + v;
                if side > 0.0 {
                    t_right = k;
                } else {
                    t_left = k;
                }
                if v.magnitude() <= 1e-18 * sum.magnitude() {
                    small += 1;
                    if small >= 2 {
                        break;
                    }
                } else {
                    small = 0;
                }
                k += 1.0;
            }
        }
        // Half-steps beyond the last integer node are included at finer levels.
        let t_right = (t_right + 0.5).min(T_LIMIT);
        let t_left = (t_left + 0.5).min(T_LIMIT);

        let mut h = 1.0;
        let mut estimate = sum;
        let mut error = f64::INFINITY;
        for level in 1..=self.max_level {
            h *= 0.5;
            let mut t = h;
            while t <= t_right {
                if let Some(v) = term(t, &mut evals) {
                    sum = sum + v;
                }
                t += 2.0 * h;
            }
            let mut t = h;
            while t <= t_left {
                if let Some(v) = term(-t, &mut evals) {
                    sum = sum + v;
                }
                t += 2.0 * h;
            }
            let next = sum * h;
            error = (next - estimate).magnitude();
            estimate = next;
            if level >= 3 && error <= self.abs_tol.max(self.rel_tol * estimate.magnitude()) {
                return Estimate {
                    value: estimate,
                    error,
                    evals,
                    converged: true,
                };
            }
        }
        Estimate {
            value: estimate,
            error,
            evals,
            converged: error.is_finite()
                && error <= self.abs_tol.max(self.rel_tol * estimate.magnitude()),
        }
    }

    /// Integrate `f(x)` over `[a, b]`.
    pub fn integrate_interval<V, F>(&self, a: f64, b: f64, mut f: F) -> Estimate<V>
    where
        V: QuadValue,
        F: FnMut(f64) -> V,
    {
        self.integrate(b - a, |dl, _| f(a + dl))
    }
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728_0,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// Adaptive 7/15-point Gauss-Kronrod rule with global bisection.
#[derive(Clone, Copy, Debug)]
pub struct GaussKronrod {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_intervals: usize,
}

impl Default for GaussKronrod {
    fn default() -> Self {
        Self {
            rel_tol: 1e-12,
            abs_tol: 1e-300,
            max_intervals: 2000,
        }
    }
}

struct Panel<V> {
    a: f64,
    b: f64,
    value: V,
    error: f64,
}

impl<V> PartialEq for Panel<V> {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl<V> Eq for Panel<V> {}
impl<V> PartialOrd for Panel<V> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl<V> Ord for Panel<V> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.error.total_cmp(&other.error)
    }
}

impl GaussKronrod {
    pub fn with_tol(rel_tol: f64) -> Self {
        Self {
            rel_tol,
            ..Self::default()
        }
    }

    pub fn abs_tol(self, abs_tol: f64) -> Self {
        Self { abs_tol, ..self }
    }

    fn panel<V: QuadValue, F: FnMut(f64) -> V>(a: f64, b: f64, f: &mut F) -> Panel<V> {
        let c = 0.5 * (a + b);
        let hw = 0.5 * (b - a);
        let fc = f(c);
        let mut kronrod = fc * WGK[7];
        let mut gauss = fc * WG[3];
        for j in 0..7 {
            let dx = hw * XGK[j];
            let pair = f(c - dx) + f(c + dx);
            kronrod = kronrod + pair * WGK[j];
            if j % 2 == 1 {
                gauss = gauss + pair * WG[j / 2];
            }
        }
        let value = kronrod * hw;
        let error = ((kronrod - gauss) * hw).magnitude();
        Panel { a, b, value, error }
    }

    pub fn integrate<V, F>(&self, a: f64, b: f64, f: F) -> Estimate<V>
    where
        V: QuadValue,
        F: FnMut(f64) -> V,
    {
        self.integrate_panels(a, b, 1, f)
    }

    /// Start from `panels` equal sub-intervals (useful for oscillatory integrands).
    pub fn integrate_panels<V, F>(&self, a: f64, b: f64, panels: usize, mut f: F) -> Estimate<V>
    where
        V: QuadValue,
        F: FnMut(f64) -> V,
    {
        if b <= a {
            return Estimate {
                value: V::zero(),
                error: 0.0,
                evals: 0,
                converged: true,
            };
        }
        let panels = panels.max(1);
        let mut heap = BinaryHeap::with_capacity(panels * 2);
        let mut total = V::zero();
        let mut error = 0.0;
        let width = (b - a) / panels as f64;
        for i in 0..panels {
            let lo = a + width * i as f64;
            let hi = if i + 1 == panels { b } else { lo + width };
            let p = Self::panel(lo, hi, &mut f);
            total = total + p.value;
            error += p.error;
            heap.push(p);
        }
        let mut evals = 15 * panels;
        while error > self.abs_tol.max(self.rel_tol * total.magnitude()) && heap.len() < self.max_intervals {
            let Some(worst) = heap.pop() else { break };
            let mid = 0.5 * (worst.a + worst.b);
            if mid <= worst.a || mid >= worst.b {
                heap.push(worst);
                break;
            }
            let left = Self::panel(worst.a, mid, &mut f);
            let right = Self::panel(mid, worst.b, &mut f);
            evals += 30;
            total = total - worst.value + left.value + right.value;
            error += left.error + right.error - worst.error;
            heap.push(left);
            heap.push(right);
        }
        // Re-sum to shed the rounding drift of the running updates.
        let mut value = V::zero();
        let mut err = 0.0;
        for p in heap.iter() {
            value = value + p.value;
            err += p.error;
        }
        Estimate {
            value,
            error: err,
            evals,
            converged: err <= self.abs_tol.max(self.rel_tol * value.magnitude()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tanh_sinh_polynomial_and_singular() {
        let ts = TanhSinh::default();
        let p = ts.integrate_interval(0.0, 2.0, |x: f64| x * x * x);
        assert!((p.value - 4.0).abs() < 1e-13, "{:?}", p.value);
        // Integrable endpoint singularity x^{-0.9}: 10 * 1^{0.1}.
        let s = ts.integrate(1.0, |dl: f64, _| dl.powf(-0.9));
        assert!((s.value - 10.0).abs() < 1e-9, "{}", s.value);
        // Right endpoint singularity through dr.
        let r = ts.integrate(1.0, |_, dr: f64| dr.powf(-0.5));
        assert!((r.value - 2.0).abs() < 1e-12);
    }

    #[test]
    fn gauss_kronrod_oscillatory() {
        let gk = GaussKronrod::default();
        let w = 200.0;
        let est = gk.integrate_panels(0.0, 1.0, 64, |x: f64| Complex64::new(0.0, w * x).exp());
        let exact = (Complex64::new(0.0, w).exp() - 1.0) / Complex64::new(0.0, w);
        assert!((est.value - exact).norm() < 1e-12);
    }

    #[test]
    fn rules_agree_on_smooth_integrand() {
        let f = |x: f64| (3.0 * x).sin() * (-x).exp();
        let a = TanhSinh::default().integrate_interval(0.0, 2.0, f).value;
        let b = GaussKronrod::default().integrate(0.0, 2.0, f).value;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn empty_interval_is_zero() {
        let e: Estimate<f64> = TanhSinh::default().integrate(0.0, |_, _| 1.0);
        assert_eq!(e.value, 0.0);
    }
}
