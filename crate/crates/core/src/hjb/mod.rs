//! Dynamic programming on the cone of unnormalized laws.
//!
//! The value function of the separated problem solves
//!
//! ```text
//! v_t + sup_a [ 1/2 sum_k sigma_k^T D^2 v sigma_k + <b(x,a,t), Dv> + <f(a,t), x> ] = 0,   v(T, x) = <g, x>
//! ```
//!
//! with `b_i(x,a,t) = sum_j x_j q(a,t,j,i)` and `sigma_k(x,a,t)_i = x_i h_k(i,a,t)`,
//! or its discounted stationary counterpart `beta v = sup_a [...]`.
//!
//! The solver works on the box `[0, L]^N` with an explicit monotone scheme:
//! upwind differences for the drift and a semi-Lagrangian average for the
//! diffusion, weighted so that every stencil coefficient is nonnegative under
//! the step restriction reported by [`cfl_bound`]. Values on the outer faces
//! come from degree-1 homogeneity. Monotone, stable and consistent, the scheme
//! converges to the viscosity solution.

mod bracket;
mod grid;
mod policy;
mod solver;
mod verify;

use thiserror::Error;

use crate::filter::FilterError;
use crate::grid::GridError;
use crate::measure::MeasureError;

pub use bracket::{bracket_for, hamiltonian_bracket, local_coefficients, LocalCoefficients};
pub use grid::SpatialGrid;
pub use policy::{extract_policy, FeedbackPolicy};
pub use solver::{
    cfl_bound, min_steps, solve_discounted_truncated, solve_elliptic, solve_parabolic,
    SolverReport, ValueGrid,
};
pub use verify::{
    simulate_closed_loop, verify_optimality, Challenger, ChallengerOutcome, ClosedLoopRun,
    VerificationReport, VerifyOptions,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HjbError {
    #[error("invalid spatial grid: {0}")]
    InvalidGrid(String),

    #[error("time step {dt} violates the monotonicity condition; the largest admissible step is {max_dt}")]
    CflViolation { dt: f64, max_dt: f64 },

    #[error("value iteration did not converge in {iterations} iterations (last residuals {residuals:?})")]
    NoConvergence {
        iterations: usize,
        residuals: Vec<f64>,
    },

    #[error("{0}")]
    Unsupported(String),

    #[error("invalid point: {0}")]
    InvalidPoint(String),

    #[error(transparent)]
    Grid(#[from] GridError),

    #[error(transparent)]
    Filter(#[from] FilterError),

    #[error(transparent)]
    Measure(#[from] MeasureError),
}
