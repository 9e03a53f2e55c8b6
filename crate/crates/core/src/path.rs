//! Deterministic scalar paths on `[0, T]` used as integrands and controls.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Right-continuous step function: `values[i]` on `[breaks[i], breaks[i + 1])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepPath {
    breaks: Vec<f64>,
    values: Vec<f64>,
}

impl StepPath {
    pub fn new(breaks: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if breaks.len() != values.len() + 1 || values.is_empty() {
            return Err(Error::domain("step path needs one more break than values"));
        }
        if breaks[0] != 0.0 {
            return Err(Error::domain("step path must start at 0"));
        }
        if breaks.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::domain("step path breaks must be strictly increasing"));
        }
        Ok(Self { breaks, values })
    }

    pub fn constant(value: f64, horizon: f64) -> Self {
        Self {
            breaks: vec![0.0, horizon],
            values: vec![value],
        }
    }

    /// `1_{[0, t]}` on `[0, horizon]`.
    pub fn indicator(t: f64, horizon: f64) -> Result<Self> {
        if !(t > 0.0 && t <= horizon) {
            return Err(Error::domain(format!("indicator end {t} outside (0, {horizon}]")));
        }
        if t == horizon {
            return Ok(Self::constant(1.0, horizon));
        }
        Self::new(vec![0.0, t, horizon], vec![1.0, 0.0])
    }

    /// Piecewise constant on a uniform grid of `values.len()` cells.
    pub fn uniform(values: Vec<f64>, horizon: f64) -> Result<Self> {
        let n = values.len();
        let breaks = (0..=n).map(|k| horizon * k as f64 / n as f64).collect();
        Self::new(breaks, values)
    }

    pub fn horizon(&self) -> f64 {
        *self.breaks.last().unwrap()
    }

    pub fn breaks(&self) -> &[f64] {
        &self.breaks
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, t: f64) -> f64 {
        let idx = self.breaks.partition_point(|&b| b <= t);
        if idx == 0 {
            self.values[0]
        } else {
            self.values[(idx - 1).min(self.values.len() - 1)]
        }
    }

    /// `1_{[0, t]} * self`, still defined on the full horizon.
    pub fn restrict(&self, t: f64) -> Result<Self> {
        let horizon = self.horizon();
        if !(t > 0.0 && t <= horizon) {
            return Err(Error::domain(format!("restriction point {t} outside (0, {horizon}]")));
        }
        let mut breaks = vec![0.0];
        let mut values = Vec::new();
        for i in 0..self.values.len() {
            let (a, b) = (self.breaks[i], self.breaks[i + 1]);
            if a >= t {
                break;
            }
            values.push(self.values[i]);
            breaks.push(b.min(t));
        }
        if t < horizon {
            values.push(0.0);
            breaks.push(horizon);
        }
        Self::new(breaks, values)
    }

    /// The same path viewed on the shorter horizon `[0, t]`.
    pub fn truncate(&self, t: f64) -> Result<Self> {
        let r = self.restrict(t)?;
        if t == self.horizon() {
            return Ok(r);
        }
        let mut breaks = r.breaks;
        let mut values = r.values;
        breaks.pop();
        values.pop();
        Self::new(breaks, values)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            breaks: self.breaks.clone(),
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }
}

/// Polynomial `sum_k coeffs[k] t^k` on `[0, horizon]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    pub coeffs: Vec<f64>,
}

impl Polynomial {
    pub fn new(coeffs: Vec<f64>) -> Self {
        Self { coeffs }
    }

    pub fn value(&self, t: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c)
    }

    pub fn derivative(&self) -> Polynomial {
        Polynomial {
            coeffs: self
                .coeffs
                .iter()
                .enumerate()
                .skip(1)
                .map(|(k, c)| k as f64 * c)
                .collect(),
        }
    }
}

/// Scalar integrand or control on `[0, T]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Path {
    Step(StepPath),
    Polynomial(Polynomial),
}

impl Path {
    pub fn value(&self, t: f64) -> f64 {
        match self {
            Path::Step(p) => p.value(t),
            Path::Polynomial(p) => p.value(t),
        }
    }

    /// Interior discontinuities in `(0, horizon)`.
    pub fn jumps(&self, horizon: f64) -> Vec<f64> {
        match self {
            Path::Step(p) => p
                .breaks()
                .iter()
                .copied()
                .filter(|&b| b > 0.0 && b < horizon)
                .collect(),
            Path::Polynomial(_) => Vec::new(),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Path::Step(p) => p.values().iter().all(|&v| v == 0.0),
            Path::Polynomial(p) => p.coeffs.iter().all(|&c| c == 0.0),
        }
    }
}

impl From<StepPath> for Path {
    fn from(p: StepPath) -> Self {
        Path::Step(p)
    }
}

impl From<Polynomial> for Path {
    fn from(p: Polynomial) -> Self {
        Path::Polynomial(p)
    }
}

/// Sorted union of `0`, `horizon` and the jumps of every path.
pub(crate) fn segment_points(horizon: f64, paths: &[&Path]) -> Vec<f64> {
    let mut pts = vec![0.0, horizon];
    for p in paths {
        pts.extend(p.jumps(horizon));
    }
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    pts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_lookup_is_right_continuous() {
        let p = StepPath::new(vec![0.0, 0.5, 1.0], vec![2.0, 3.0]).unwrap();
        assert_eq!(p.value(0.0), 2.0);
        assert_eq!(p.value(0.49), 2.0);
        assert_eq!(p.value(0.5), 3.0);
        assert_eq!(p.value(1.0), 3.0);
    }

    #[test]
    fn restrict_and_truncate() {
        let p = StepPath::new(vec![0.0, 0.25, 0.75, 1.0], vec![1.0, 2.0, 3.0]).unwrap();
        let r = p.restrict(0.5).unwrap();
        assert_eq!(r.breaks(), &[0.0, 0.25, 0.5, 1.0]);
        assert_eq!(r.values(), &[1.0, 2.0, 0.0]);
        let t = p.truncate(0.5).unwrap();
        assert_eq!(t.breaks(), &[0.0, 0.25, 0.5]);
        assert_eq!(t.horizon(), 0.5);
    }

    #[test]
    fn rejects_bad_breaks() {
        assert!(StepPath::new(vec![0.0, 0.5, 0.5], vec![1.0, 2.0]).is_err());
        assert!(StepPath::new(vec![0.1, 0.5], vec![1.0]).is_err());
    }

    #[test]
    fn polynomial_horner_and_derivative() {
        let p = Polynomial::new(vec![1.0, -2.0, 3.0]);
        assert_eq!(p.value(2.0), 1.0 - 4.0 + 12.0);
        assert_eq!(p.derivative().coeffs, vec![-2.0, 6.0]);
    }
}
