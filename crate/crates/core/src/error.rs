use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Grid spacing fell below the configured floor h0.
    #[error("grid spacing h = {h} is below the floor h0 = {h0} (assumption h >= h0 > 0)")]
    SpacingFloor { h: f64, h0: f64 },

    #[error("evaluation point coincides with a source point")]
    Singular,

    #[error("solver did not converge after {iterations} iterations (relative residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("sampling guard violated: spacing {h} exceeds the Nyquist limit pi/k = {limit}")]
    Nyquist { h: f64, limit: f64 },

    #[error("Gram-Schmidt breakdown at basis function {0}")]
    GramSchmidt(usize),

    #[error("quadrature of order {order} is not accurate enough: error {error:e}")]
    Quadrature { order: usize, error: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("{count} of {total} source solves failed; first: {first}")]
    Sweep { count: usize, total: usize, first: Box<Error> },

    #[error("missing input file {}", .0.display())]
    MissingInput(PathBuf),

    #[error("malformed file {}: {reason}", .path.display())]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
