//! Mean-field (McKean–Vlasov) formulation of stochastic optimal control:
//! two interacting particle systems, one forward and one in reverse time,
//! whose empirical moments give an affine feedback law.

pub mod cli;
pub mod dmap;
pub mod enkf;
pub mod error;
pub mod horizon;
pub mod linalg;
pub mod problem;
pub mod rng;
pub mod scenarios;
pub mod solver;
pub mod stats;

pub use error::{Error, Result};
pub use problem::{AffineControlSchedule, ControlProblem};
pub use solver::{solve, Backend, EpsSchedule, Solution, SolverConfig, SweepRecord};
pub use stats::{Ensemble, EmpiricalMoments};
