//! Uniform time grids shared by simulation, filtering and the adjoint solver.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("step {dt} does not divide the horizon {horizon}")]
    StepDoesNotDivide { horizon: f64, dt: f64 },

    #[error("grid parameters must be positive and finite (horizon {horizon}, dt {dt})")]
    NonPositive { horizon: f64, dt: f64 },
}

/// The grid `t_k = k * dt`, `k = 0..=n_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    dt: f64,
    n_steps: usize,
}

impl TimeGrid {
    /// Grid on `[0, horizon]`; `dt` must divide `horizon` up to rounding.
    pub fn new(horizon: f64, dt: f64) -> Result<Self, GridError> {
        if !(horizon > 0.0 && dt > 0.0 && horizon.is_finite() && dt.is_finite()) {
            return Err(GridError::NonPositive { horizon, dt });
        }
        let n = (horizon / dt).round();
        if n < 1.0 || (n * dt - horizon).abs() > 1e-9 * horizon.max(1.0) {
            return Err(GridError::StepDoesNotDivide { horizon, dt });
        }
        Ok(Self {
            dt: horizon / n,
            n_steps: n as usize,
        })
    }

    pub fn with_steps(horizon: f64, n_steps: usize) -> Result<Self, GridError> {
        if !(horizon > 0.0 && horizon.is_finite()) || n_steps == 0 {
            return Err(GridError::NonPositive {
                horizon,
                dt: horizon / n_steps as f64,
            });
        }
        Ok(Self {
            dt: horizon / n_steps as f64,
            n_steps,
        })
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.dt
    }

    #[inline]
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    #[inline]
    pub fn horizon(&self) -> f64 {
        self.dt * self.n_steps as f64
    }

    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    /// Cell `k` with `t_k <= t < t_{k+1}`, clamped to the last cell.
    #[inline]
    pub fn cell_of(&self, t: f64) -> usize {
        let k = (t / self.dt + 1e-9).floor();
        if k <= 0.0 {
            0
        } else {
            (k as usize).min(self.n_steps - 1)
        }
    }

    /// The grid refined by a factor `factor`.
    pub fn refined(&self, factor: usize) -> Self {
        Self {
            dt: self.dt / factor as f64,
            n_steps: self.n_steps * factor,
        }
    }
}
