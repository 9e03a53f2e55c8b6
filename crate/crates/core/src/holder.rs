//! Empirical Hölder exponents from dyadic-lag increments.
//!
//! For each lag `l = 4, 8, ..., n/8` the root-mean-square increment
//! `(mean_k |x(t_{k+l}) - x(t_k)|^2)^{1/2}` is regressed on `l` in log-log
//! coordinates. The slope of the same regression using the largest increment
//! at each lag is reported alongside as `sup_exponent`; it carries a
//! logarithmic bias (modulus of continuity) and is therefore not the headline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{sobolev_norm, ComplexField, SobolevIndex};
use crate::parallel::map_indices;
use crate::stats::linear_fit;

/// Fewest grid points accepted by the estimator.
pub const MIN_POINTS: usize = 1 << 10;

/// Dyadic lag range, in samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LagRange {
    pub min: usize,
    pub max: usize,
}

impl LagRange {
    /// `4 ..= n/8` for a path with `n` increments.
    pub fn default_for(n: usize) -> Self {
        Self { min: 4, max: n / 8 }
    }

    fn lags(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut l = self.min.max(1).next_power_of_two();
        while l <= self.max {
            out.push(l);
            l *= 2;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HolderReport {
    /// Slope of the RMS regression clamped into `[0, 1]`.
    pub exponent: f64,
    /// Unclamped slope.
    pub slope: f64,
    pub r_squared: f64,
    pub lag_min: usize,
    pub lag_max: usize,
    pub sup_exponent: f64,
    /// Constant (or numerically constant) path: no exponent can be read off.
    pub degenerate: bool,
    /// `(lag, rms, sup)` per regression point.
    pub points: Vec<(usize, f64, f64)>,
}

/// Estimator over an abstract path given by `dist(j, k) = |x(t_j) - x(t_k)|`.
pub fn holder_exponent_by<F>(points: usize, lags: LagRange, dist: F) -> Result<HolderReport>
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    if points < MIN_POINTS {
        return Err(Error::domain(format!(
            "Hölder estimate needs at least {MIN_POINTS} time points, got {points}"
        )));
    }
    let ls = lags.lags();
    if ls.len() < 2 || *ls.last().unwrap_or(&0) >= points {
        return Err(Error::domain(format!(
            "lag range {}..{} holds fewer than two dyadic lags below {points}",
            lags.min, lags.max
        )));
    }
    let stats: Vec<(f64, f64)> = map_indices(ls.len(), |i| {
        let l = ls[i];
        let (mut sq, mut sup) = (0.0_f64, 0.0_f64);
        let count = points - l;
        for k in 0..count {
            let d = dist(k + l, k);
            sq += d * d;
            sup = sup.max(d);
        }
        ((sq / count as f64).sqrt(), sup)
    });
    let pts: Vec<(usize, f64, f64)> = ls.iter().zip(&stats).map(|(&l, &(r, s))| (l, r, s)).collect();
    let scale = stats.iter().map(|s| s.1).fold(0.0, f64::max);
    let degenerate = stats.iter().any(|&(r, s)| !(r > 0.0 && s > 0.0 && r.is_finite() && s.is_finite()))
        || scale == 0.0;
    let (lag_min, lag_max) = (ls[0], *ls.last().unwrap_or(&ls[0]));
    if degenerate {
        return Ok(HolderReport {
            exponent: 0.0,
            slope: 0.0,
            r_squared: 0.0,
            lag_min,
            lag_max,
            sup_exponent: 0.0,
            degenerate,
            points: pts,
        });
    }
    let x: Vec<f64> = ls.iter().map(|&l| (l as f64).ln()).collect();
    let rms: Vec<f64> = stats.iter().map(|s| s.0.ln()).collect();
    let sup: Vec<f64> = stats.iter().map(|s| s.1.ln()).collect();
    let fit = linear_fit(&x, &rms);
    Ok(HolderReport {
        exponent: fit.slope.clamp(0.0, 1.0),
        slope: fit.slope,
        r_squared: fit.r_squared,
        lag_min,
        lag_max,
        sup_exponent: linear_fit(&x, &sup).slope,
        degenerate,
        points: pts,
    })
}

/// Scalar path with the default lag range.
pub fn holder_exponent(values: &[f64]) -> Result<HolderReport> {
    let n = values.len().saturating_sub(1);
    holder_exponent_by(values.len(), LagRange::default_for(n), |j, k| (values[j] - values[k]).abs())
}

/// Field-valued path measured in `H^s`, default lag range.
pub fn holder_exponent_fields(fields: &[ComplexField], norm: SobolevIndex) -> Result<HolderReport> {
    let n = fields.len().saturating_sub(1);
    holder_exponent_by(fields.len(), LagRange::default_for(n), |j, k| {
        fields[j]
            .sub(&fields[k])
            .map_or(f64::NAN, |d| sobolev_norm(&d, norm))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbm::{CirculantSampler, FbmSampler, TimeGrid};
    use crate::rng::Streams;

    #[test]
    fn lipschitz_path() {
        let v: Vec<f64> = (0..=4096).map(|k| k as f64 / 4096.0).collect();
        let r = holder_exponent(&v).unwrap();
        assert!((r.exponent - 1.0).abs() < 0.02);
        assert!((r.sup_exponent - 1.0).abs() < 0.02);
        assert_eq!((r.lag_min, r.lag_max), (4, 512));
    }

    #[test]
    fn constant_path_is_degenerate() {
        let r = holder_exponent(&[3.0; 2048]).unwrap();
        assert!(r.degenerate);
    }

    #[test]
    fn short_path_rejected() {
        assert!(holder_exponent(&[0.0; 1000]).is_err());
    }

    #[test]
    fn fbm_exponent_bracketed() {
        let tg = TimeGrid::new(1.0, 1 << 14).unwrap();
        let s = CirculantSampler::new(0.7, &tg).unwrap().unwrap();
        let p = s.sample_path(&mut Streams::new(5).rng(0));
        let r = holder_exponent(&p).unwrap();
        assert!((r.exponent - 0.7).abs() < 0.08, "{r:?}");
    }
}
