//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by mesh construction, assembly, solvers, and file I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("mesh quality gate failed: {0}")]
    MeshQuality(String),

    #[error("no {domain} quadrature rule tabulated up to degree {degree}")]
    QuadratureUnavailable { domain: &'static str, degree: usize },

    #[error(
        "quadrature rule with {points} points cannot produce a nonsingular \
         mass matrix for {needed} basis functions"
    )]
    QuadratureTooSmall { points: usize, needed: usize },

    #[error("point ({x}, {y}) is not on the unit circle")]
    OffBoundary { x: f64, y: f64 },

    #[error(
        "pressure sub-iteration stalled: increment {last:.3e} after {sweeps} sweeps \
         (target {eps:.1e})"
    )]
    PressureIterationStalled { eps: f64, sweeps: usize, last: f64 },

    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("time {t} lies outside the trajectory span [{t0}, {t1}]")]
    OutsideSpan { t: f64, t0: f64, t1: f64 },

    #[error("snapshot cadence mismatch: {0}")]
    CadenceMismatch(String),

    #[error("file format error: {0}")]
    Format(String),

    #[error("cache mismatch: {0}")]
    CacheMismatch(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
