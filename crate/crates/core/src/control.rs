//! Deterministic controls `h` for the skeleton equation.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbm::TimeGrid;

/// Piecewise-constant control: `values[i][c]` is the complex coefficient of
/// Fourier mode `modes[i]` on time cell `c`. Modes not listed are zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Control {
    pub grid: TimeGrid,
    pub modes: Vec<usize>,
    pub values: Vec<Vec<Complex64>>,
}

impl Control {
    pub fn new(grid: TimeGrid, modes: Vec<usize>, values: Vec<Vec<Complex64>>) -> Result<Self> {
        if modes.len() != values.len() || values.iter().any(|v| v.len() != grid.steps()) {
            return Err(Error::domain("control needs one series of n cells per mode"));
        }
        Ok(Self { grid, modes, values })
    }

    pub fn zero(grid: TimeGrid, modes: Vec<usize>) -> Self {
        let values = vec![vec![Complex64::new(0.0, 0.0); grid.steps()]; modes.len()];
        Self { grid, modes, values }
    }

    /// `sum_j int_0^T |h_j(s)|^2 ds`.
    pub fn norm_sq(&self) -> f64 {
        self.grid.dt() * self.values.iter().flatten().map(|c| c.norm_sqr()).sum::<f64>()
    }

    /// The rate `1/2 |h|^2`.
    pub fn energy(&self) -> f64 {
        0.5 * self.norm_sq()
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            grid: self.grid,
            modes: self.modes.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.iter().map(|c| c * a).collect())
                .collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().flatten().all(|c| c.norm_sqr() == 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norm_is_cell_weighted() {
        let g = TimeGrid::new(2.0, 4).unwrap();
        let h = Control::new(g, vec![0], vec![vec![Complex64::new(1.0, 1.0); 4]]).unwrap();
        assert!((h.norm_sq() - 2.0 * 2.0).abs() < 1e-15);
        assert!((h.scaled(2.0).energy() - 4.0 * h.energy()).abs() < 1e-15);
        assert!(Control::new(g, vec![0, 1], vec![vec![]]).is_err());
    }
}
