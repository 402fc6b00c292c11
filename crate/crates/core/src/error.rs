//! Error type shared by the whole crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A per-unit log-likelihood evaluation failed (infeasible parameters,
    /// non-finite value, or a failed censoring integral for that unit).
    #[error("log-likelihood evaluation failed for unit {unit}: {reason}")]
    Evaluation { unit: usize, reason: String },

    /// Invalid user-supplied configuration or arguments.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// The scoring matrix stayed singular after the whole safeguard ladder.
    #[error("scoring matrix singular after safeguards (smallest eigenvalue {min_eigenvalue:.3e})")]
    SingularScoringMatrix { min_eigenvalue: f64 },

    /// A matrix expected to be positive definite failed its Cholesky factorization.
    #[error("matrix not positive definite: pivot {pivot:.3e} at index {index}")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    /// Numerical integration exhausted its budget above the requested tolerance.
    #[error("integration tolerance {requested:.2e} unmet, error estimate {estimate:.2e}")]
    IntegrationTolerance { requested: f64, estimate: f64 },

    /// Backtracking line search found no improving step length.
    #[error("line search failed after {tried} trial step lengths")]
    LineSearchFailed { tried: usize },

    /// Damping parameter grew past its cap without an acceptable step.
    #[error("damping parameter exceeded {limit:.1e} without an acceptable step")]
    DampingOverflow { limit: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
