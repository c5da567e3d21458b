use thiserror::Error;

/// Errors raised by the numerical routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("matrix is not positive semidefinite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("solution norm {norm:e} exceeded the blow-up bound at t = {t}")]
    BlowUp { t: f64, norm: f64 },

    #[error("block A22 is singular at t = {t}")]
    SingularBlock { t: f64 },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("cross-check failed: {what} differs by {diff:e}")]
    CrossCheck { what: String, diff: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
