//! Control processes: open-loop grid paths and feedback laws.
//!
//! Controls are piecewise constant on a uniform grid with the left-limit
//! convention: the control used on `[t_k, t_{k+1})` is decided from
//! information available at `t_k`.

use thiserror::Error;

use crate::grid::TimeGrid;
use crate::model::ControlModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("control path has {found} cells but the grid has {expected}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("control index {index} is outside the control grid of size {size}")]
    OutOfRange { index: usize, size: usize },

    #[error("control path on [0, {horizon}] does not cover time {t}")]
    ControlUndefined { t: f64, horizon: f64 },
}

/// One control index per grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPath {
    grid: TimeGrid,
    controls: Vec<usize>,
}

impl ControlPath {
    pub fn new(grid: TimeGrid, controls: Vec<usize>) -> Result<Self, ControlError> {
        if controls.len() != grid.n_steps() {
            return Err(ControlError::LengthMismatch {
                expected: grid.n_steps(),
                found: controls.len(),
            });
        }
        Ok(Self { grid, controls })
    }

    pub fn constant(grid: TimeGrid, a: usize) -> Self {
        Self {
            grid,
            controls: vec![a; grid.n_steps()],
        }
    }

    /// Checks every entry against the model's control grid.
    pub fn check(&self, model: &ControlModel) -> Result<(), ControlError> {
        match self.controls.iter().find(|&&a| a >= model.n_controls()) {
            Some(&index) => Err(ControlError::OutOfRange {
                index,
                size: model.n_controls(),
            }),
            None => Ok(()),
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.controls
    }

    #[inline]
    pub fn cell(&self, k: usize) -> usize {
        self.controls[k]
    }

    /// Control in force at time `t`.
    pub fn at(&self, t: f64) -> Result<usize, ControlError> {
        let horizon = self.grid.horizon();
        if !(t >= 0.0) || t > horizon * (1.0 + 1e-12) {
            return Err(ControlError::ControlUndefined { t, horizon });
        }
        Ok(self.controls[self.grid.cell_of(t)])
    }
}

/// A feedback map from time and unnormalized filter state to a control index.
pub trait FeedbackLaw: Sync {
    fn control(&self, t: f64, rho: &[f64]) -> usize;
}

impl<F> FeedbackLaw for F
where
    F: Fn(f64, &[f64]) -> usize + Sync,
{
    fn control(&self, t: f64, rho: &[f64]) -> usize {
        self(t, rho)
    }
}

/// Where the control of a simulation comes from.
#[derive(Clone, Copy)]
pub enum ControlSource<'a> {
    Constant(usize),
    OpenLoop(&'a ControlPath),
    Feedback(&'a dyn FeedbackLaw),
}

impl std::fmt::Debug for ControlSource<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ControlSource::Constant(a) => write!(f, "Constant({a})"),
            ControlSource::OpenLoop(p) => write!(f, "OpenLoop({} cells)", p.as_slice().len()),
            ControlSource::Feedback(_) => write!(f, "Feedback"),
        }
    }
}

impl ControlSource<'_> {
    pub fn is_open_loop(&self) -> bool {
        !matches!(self, ControlSource::Feedback(_))
    }

    /// Control for cell `k` of `grid`, given the filter state at `t_k`.
    #[inline]
    pub fn decide(&self, grid: &TimeGrid, k: usize, rho: &[f64]) -> usize {
        match self {
            ControlSource::Constant(a) => *a,
            ControlSource::OpenLoop(path) => path.cell(k),
            ControlSource::Feedback(law) => law.control(grid.time(k), rho),
        }
    }

    /// Materializes an open-loop source on `grid`; `None` for feedback.
    pub fn open_loop_path(&self, grid: TimeGrid) -> Option<Result<ControlPath, ControlError>> {
        match self {
            ControlSource::Constant(a) => Some(Ok(ControlPath::constant(grid, *a))),
            ControlSource::OpenLoop(path) => {
                if path.grid.n_steps() == grid.n_steps()
                    && (path.grid.dt() - grid.dt()).abs() <= 1e-12 * grid.dt()
                {
                    Some(Ok((*path).clone()))
                } else {
                    Some(Err(ControlError::LengthMismatch {
                        expected: grid.n_steps(),
                        found: path.controls.len(),
                    }))
                }
            }
            ControlSource::Feedback(_) => None,
        }
    }
}
