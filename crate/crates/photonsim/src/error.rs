//! Error type shared by every module in the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    /// A perturbative coupling formula hit a (near-)zero detuning.
    #[error("resonant denominator: {0}")]
    ResonantDenominator(String),

    /// Total flux excursion reaches the |cos| cusp at half a flux quantum.
    #[error("flux excursion too large: |phi_dc| + max|A| = {total:.4} Phi0 >= 0.5 Phi0")]
    FluxRange { total: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("records are on different time grids: {0}")]
    GridMismatch(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("step size underflow at t = {t_s:.6e} s (local error estimate {err:.3e})")]
    StepSizeUnderflow { t_s: f64, err: f64 },

    #[error("fit failed: {0}")]
    FitFailure(String),

    #[error("optimum sits at the edge of the search span ({0}); widen the span")]
    SpanEdge(String),

    /// Sampling or POVM grid leaks probability mass past its boundary.
    #[error("grid under-resolved: out-of-range probability mass {mass:.3e} (tolerance {tol:.1e})")]
    UnderResolvedGrid { mass: f64, tol: f64 },

    #[error("iterative solver did not converge: {0}")]
    NoConvergence(String),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    /// Malformed file content (CSV fields, binary magic/version, and so on).
    #[error("format: {0}")]
    Format(String),
}
