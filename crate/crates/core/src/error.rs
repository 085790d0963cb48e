//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix must be square, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("zero vector passed to Arnoldi process")]
    ZeroVector,

    #[error("phi series did not converge after {terms} terms (matrix norm {norm:.3e}); rescale the argument")]
    SeriesDivergence { terms: usize, norm: f64 },

    #[error("matrix exponential overflow for norm {norm:.3e}")]
    ExpOverflow { norm: f64 },

    #[error("Krylov approximation did not reach tolerance {tol:.3e} within m_max = {m_max} (estimate {estimate:.3e})")]
    KrylovNonConvergence {
        m_max: usize,
        tol: f64,
        estimate: f64,
    },

    #[error("invalid forward-difference coefficient indices: l = {l}, j = {j} (need 0 <= l <= j-1)")]
    FdIndex { l: usize, j: usize },

    #[error("tableau field `{field}` invalid at index {index}: {message}")]
    Tableau {
        field: &'static str,
        index: String,
        message: String,
    },

    #[error("integration step {step} failed: {source}")]
    StepFailed {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("adjoint sweep failed at step {step}: {source}")]
    AdjointFailed {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("covariance matrix is not symmetric positive definite: {context}")]
    NotSpd { context: &'static str },

    #[error("non-finite {what} encountered")]
    NonFinite { what: &'static str },

    #[error("estimation mode inconsistent with model structure: {message}")]
    ModeMismatch { message: String },

    #[error("invalid experiment specification: {message}")]
    Spec { message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("failed to parse {path}: {message}")]
    Parse { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;
