//! Error types shared across the laboratory.

use thiserror::Error;

/// Errors surfaced by model construction, solvers, and simulators.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model parameters: {0}")]
    InvalidParams(String),

    #[error("state space too large: {states} states exceeds the configured maximum {max}")]
    Capacity { states: u128, max: usize },

    #[error("solver failed to converge: residual {residual:.3e} after {iterations} iterations")]
    Convergence { residual: f64, iterations: usize },

    #[error("reduced linear system is numerically singular: {0}")]
    Singular(String),

    #[error("finite-difference stencil leaves the state space at {0}")]
    OutOfDomain(String),

    #[error("interpolation stencil has undefined grid values near {0:?}")]
    Stencil([f64; 2]),

    #[error("invalid coupled initial pair: {0}")]
    InvalidPair(String),

    #[error("parameter regime does not support this analysis: {0}")]
    Regime(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("fluid trajectory never reaches the vertical axis from ({0}, {1})")]
    NoAxisHit(f64, f64),

    #[error("ambiguous region classification at ({0}, {1})")]
    AmbiguousRegion(f64, f64),
}

pub type Result<T> = std::result::Result<T, Error>;
