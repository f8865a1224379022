use thiserror::Error;

use crate::projections::ProjectionAxis;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OtError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },

    #[error("Gibbs kernel underflows to zero at ({row}, {col}); use the log-domain kernel")]
    KernelUnderflow { row: usize, col: usize },

    #[error("{axis:?} marginal collapsed (zero or non-finite) at index {index}")]
    CollapsedMarginal { axis: ProjectionAxis, index: usize },

    #[error("scaling state diverged: implied plan has non-finite entries")]
    DivergedState,

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("eigen-iteration did not converge after {iterations} iterations")]
    EigenNotConverged { iterations: usize },

    #[error("reference plan is infeasible: marginal error {error:e} exceeds {limit:e}")]
    InfeasibleReference { error: f64, limit: f64 },

    #[error("trace too short for rate fit: {points} tail points, need at least {required}")]
    TraceTooShort { points: usize, required: usize },

    #[error("solve failed: {0}")]
    SolveFailed(String),
}

pub type Result<T> = std::result::Result<T, OtError>;
