//! Solver toolkit for mean-field stochastic linear-quadratic control with
//! random coefficients, discretized exactly on a non-recombining binary
//! scenario tree.
//!
//! Pipeline: scenario tree and coefficient field (`model`), forward dynamics
//! and costs (`tree_sde`), the stochastic Riccati recursion and hat
//! coefficients (`riccati`), linear/mean-field BSDE and coupled FBSDE solvers
//! (`bsde`), the discrete operators P, L1, L2 (`operators`), the stationarity
//! system and control recovery (`stationarity`), independent oracles and
//! property checks (`verify`), artifact serialization (`report`), and a
//! built-in instance corpus (`corpus`).

pub mod bsde;
pub mod corpus;
pub mod error;
pub mod model;
pub mod operators;
pub mod report;
pub mod riccati;
pub mod stationarity;
pub mod tree_sde;
pub mod verify;

pub use error::{Error, Result};
pub use model::{load_spec, parse_spec, ProblemSpec};
pub use stationarity::{solve_mfslq, SolveReport};
pub use verify::{brute_force_optimal, run_verification};
