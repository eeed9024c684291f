//! Optimal control of partially observed finite-state Markov chains.
//!
//! The crate follows one problem through its equivalent formulations:
//!
//! * [`model`]: the problem datum and its validation;
//! * [`chain`]: controlled chains built by Poisson thinning, the compensator
//!   residual, and physical-measure co-simulation of chain and observation;
//! * [`measure`]: the Girsanov density and the reference, physical and
//!   separated reward estimators;
//! * [`filter`]: the controlled Wonham filter (Euler-Maruyama and robust
//!   schemes) and its Monte Carlo oracle;
//! * [`hjb`]: monotone solvers for the parabolic and elliptic HJB equations
//!   on the cone of unnormalized laws, feedback extraction and verification;
//! * [`smp`]: the adjoint BSDE by regression Monte Carlo and the Hamiltonian
//!   maximum condition.
//!
//! States and controls are 0-based indices in the API; files use 1-based
//! state labels.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chain;
pub mod control;
pub mod filter;
pub mod grid;
pub mod hjb;
pub mod measure;
pub mod model;
pub mod rng;
pub mod smp;
pub mod stats;

pub use chain::{ChainPath, DrivingNoise, InitialLaw, JumpNoise};
pub use control::{ControlPath, ControlSource, FeedbackLaw};
pub use filter::{FilterPath, Scheme};
pub use grid::TimeGrid;
pub use model::{validate_model, ControlModel, Horizon, ModelDocument, ModelError};
pub use rng::SeedRecord;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/reference-measure.md")]
    mod reference_measure {}
    #[doc = include_str!("../../../book/src/filtering.md")]
    mod filtering {}
    #[doc = include_str!("../../../book/src/hjb.md")]
    mod hjb {}
    #[doc = include_str!("../../../book/src/maximum-principle.md")]
    mod maximum_principle {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
