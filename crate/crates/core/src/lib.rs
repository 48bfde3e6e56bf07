//! Penalized mean-field game obstacle problems on periodic grids.
//!
//! The crate discretizes the stationary first-order system with a centered
//! finite-difference scheme, solves the penalized problem for a fixed
//! penalization parameter by damped Newton iteration, and drives the parameter
//! to zero with a continuation loop that records a priori estimate quantities.

pub mod cli;
pub mod continuation;
pub mod diagnostics;
pub mod error;
pub mod grid;
pub mod model;
pub mod penalized;
pub mod rng;
pub mod sparse;

pub use error::{Error, Result};
pub use grid::{GridField, GridVectorField, Norms, PeriodicGrid};
pub use model::{CouplingSpec, HamiltonianSpec, ModelSpec, PenalizationSpec, PotentialTerm};
pub use penalized::{newton_solve, JacobianMode, PenalizedSolution, SolverOptions};
pub use continuation::{run_continuation, EpsilonSchedule, LimitReport, LimitSolution};
pub use diagnostics::{EstimateReport, UniquenessGap};
