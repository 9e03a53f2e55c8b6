//! Power-type nonlinearities `f(u) = rho(|u|^2) u` with real `rho`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NonlinearityKind {
    Kerr,
    Saturated,
}

/// `kerr`: `f(u) = lambda |u|^{2 sigma} u`.
/// `saturated`: `f(u) = lambda |u|^{2 sigma} u / (1 + kappa |u|^{2 sigma})`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonlinearitySpec {
    pub kind: NonlinearityKind,
    pub lambda: f64,
    pub sigma: f64,
    #[serde(default)]
    pub kappa: f64,
}

impl NonlinearitySpec {
    pub fn kerr(lambda: f64, sigma: f64) -> Result<Self> {
        let nl = Self {
            kind: NonlinearityKind::Kerr,
            lambda,
            sigma,
            kappa: 0.0,
        };
        nl.validate()?;
        Ok(nl)
    }

    pub fn saturated(lambda: f64, sigma: f64, kappa: f64) -> Result<Self> {
        let nl = Self {
            kind: NonlinearityKind::Saturated,
            lambda,
            sigma,
            kappa,
        };
        nl.validate()?;
        Ok(nl)
    }

    /// The zero nonlinearity, used for the linear problem.
    pub fn linear() -> Self {
        Self {
            kind: NonlinearityKind::Kerr,
            lambda: 0.0,
            sigma: 1.0,
            kappa: 0.0,
        }
    }

    pub fn is_linear(&self) -> bool {
        self.lambda == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda == 1.0 || self.lambda == -1.0 || self.lambda == 0.0) {
            return Err(Error::domain(format!("lambda must be -1 or +1, got {}", self.lambda)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::domain(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.kind == NonlinearityKind::Saturated && !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::domain(format!("kappa must be positive, got {}", self.kappa)));
        }
        Ok(())
    }

    /// `rho(|u|^2)` so that `f(u) = rho u`.
    pub fn rho(&self, modulus_sq: f64) -> f64 {
        if self.lambda == 0.0 {
            return 0.0;
        }
        let p = modulus_sq.powf(self.sigma);
        match self.kind {
            NonlinearityKind::Kerr => self.lambda * p,
            NonlinearityKind::Saturated => self.lambda * p / (1.0 + self.kappa * p),
        }
    }

    /// Potential density `G(|u|^2)` with `d/d(|u|^2) G = rho / 2`, so the
    /// energy is `1/2 |grad u|^2 - G`.
    pub fn potential(&self, modulus_sq: f64) -> f64 {
        if self.lambda == 0.0 {
            return 0.0;
        }
        let p = modulus_sq.powf(self.sigma);
        match self.kind {
            NonlinearityKind::Kerr => self.lambda * p * modulus_sq / (2.0 * self.sigma + 2.0),
            NonlinearityKind::Saturated => {
                // 1/2 int_0^m lambda r^s / (1 + kappa r^s) dr, by Gauss-Legendre in r.
                let nodes = gauss_legendre_16();
                let mut acc = 0.0;
                for (x, w) in nodes {
                    let r = 0.5 * modulus_sq * (x + 1.0);
                    let q = r.powf(self.sigma);
                    acc += w * q / (1.0 + self.kappa * q);
                }
                0.5 * self.lambda * 0.5 * modulus_sq * acc
            }
        }
    }
}

fn gauss_legendre_16() -> [(f64, f64); 16] {
    const X: [f64; 8] = [
        0.095_012_509_837_637_44,
        0.281_603_550_779_258_9,
        0.458_016_777_657_227_4,
        0.617_876_244_402_643_8,
        0.755_404_408_355_003,
        0.865_631_202_387_831_8,
        0.944_575_023_073_232_6,
        0.989_400_934_991_649_9,
    ];
    const W: [f64; 8] = [
        0.189_450_610_455_068_5,
        0.182_603_415_044_923_6,
        0.169_156_519_395_002_5,
        0.149_595_988_816_576_7,
        0.124_628_971_255_533_9,
        0.095_158_511_682_492_8,
        0.062_253_523_938_647_9,
        0.027_152_459_411_754_1,
    ];
    let mut out = [(0.0, 0.0); 16];
    for i in 0..8 {
        out[2 * i] = (X[i], W[i]);
        out[2 * i + 1] = (-X[i], W[i]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kerr_values() {
        let nl = NonlinearitySpec::kerr(1.0, 1.0).unwrap();
        assert_eq!(nl.rho(1.0), 1.0);
        assert_eq!(nl.rho(0.0), 0.0);
        assert!((nl.potential(2.0) - 4.0 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn saturated_potential_matches_kerr_for_small_kappa() {
        let s = NonlinearitySpec::saturated(1.0, 2.0, 1e-12).unwrap();
        let k = NonlinearitySpec::kerr(1.0, 2.0).unwrap();
        for m in [0.1, 1.0, 3.0] {
            assert!((s.potential(m) - k.potential(m)).abs() < 1e-9 * k.potential(m).max(1.0));
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(NonlinearitySpec::kerr(2.0, 1.0).is_err());
        assert!(NonlinearitySpec::kerr(1.0, 0.0).is_err());
        assert!(NonlinearitySpec::saturated(1.0, 1.0, 0.0).is_err());
    }
}
