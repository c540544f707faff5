use thiserror::Error;

/// Errors raised by problem construction, the sweeps, and the front end.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("time {t} outside [{lo}, {hi}]")]
    OutOfRange { t: f64, lo: f64, hi: f64 },

    #[error("{0} is not symmetric positive definite")]
    NotPositiveDefinite(String),

    #[error("ensemble has {size} particles, need at least 2")]
    InsufficientEnsemble { size: usize },

    #[error("numerical blow-up at step {step} (t = {t}), particle {particle}: {what}")]
    NumericalBlowup {
        step: usize,
        t: f64,
        particle: usize,
        what: String,
    },

    #[error("reverse covariance lost positive definiteness at step {step} (t = {t})")]
    CovarianceCollapse { step: usize, t: f64 },

    #[error("Sigma(x_{i}) + Sigma(x_{j}) is singular; diffusion maps need full-rank noise")]
    FullRankViolation { i: usize, j: usize },

    #[error("Sinkhorn scaling did not converge after {iterations} iterations (residual {residual:e})")]
    SinkhornNotConverged { iterations: usize, residual: f64 },

    #[error("no equilibrium within {max_time} time units (last residual {residual:e} in the {phase} sweep)")]
    NoEquilibrium {
        phase: &'static str,
        max_time: f64,
        residual: f64,
    },

    #[error("convex-hull certificate failed at step {step}, particle {particle}")]
    HullViolation { step: usize, particle: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerics, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NumericalBlowup { .. }
                | Error::CovarianceCollapse { .. }
                | Error::SinkhornNotConverged { .. }
                | Error::NoEquilibrium { .. }
                | Error::HullViolation { .. }
                | Error::FullRankViolation { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
