use std::io;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParams(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("infeasible autoregressive mask: {0}")]
    InfeasibleMask(String),

    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("matrix is not symmetric (max deviation {0:e})")]
    NotSymmetric(f64),

    #[error("oracle size cap exceeded: {0}")]
    SizeCap(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("missing input: {0}")]
    Missing(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
