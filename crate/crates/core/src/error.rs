//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by samplers, oracles, metrics and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    /// A vector or matrix argument has the wrong size.
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    /// A matrix that must be symmetric is not (beyond tolerance).
    #[error("{context}: matrix is not symmetric")]
    NotSymmetric { context: &'static str },

    /// A matrix that must be positive semidefinite has a genuinely negative
    /// eigenvalue.
    #[error("{context}: matrix is not positive semidefinite (eigenvalue {eigenvalue:.6e})")]
    NotPositiveSemidefinite {
        context: &'static str,
        eigenvalue: f64,
    },

    /// A symmetric positive definite linear solve failed (singular or
    /// indefinite matrix).
    #[error("{context}: symmetric positive definite solve failed")]
    SolveFailed { context: &'static str },

    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A job description is internally inconsistent or infeasible.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A particle coordinate left the trust region (or became non-finite),
    /// so the run was aborted.
    #[error("ensemble diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    /// The event-driven simulator exceeded its collision-event budget
    /// before reaching the final time.
    #[error("event budget exhausted: more than {max_events} clock rings before t = {t_final}")]
    EventBudget { max_events: u64, t_final: f64 },

    /// The fixed quadrature grid does not capture enough probability mass
    /// for the requested density.
    #[error(
        "quadrature grid too small: captured mass is a fraction {fraction:.12} of the \
         extended-grid estimate (need >= {required:.12}); widen the grid or use a \
         faster-decaying potential"
    )]
    GridTooSmall { fraction: f64, required: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
