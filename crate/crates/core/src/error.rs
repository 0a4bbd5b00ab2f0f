//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("system `{0}` has no control-affine decomposition")]
    NotAffine(String),

    #[error("unknown system `{0}`")]
    UnknownSystem(String),

    #[error("invalid parameter: {0}")]
    InvalidParams(String),

    #[error("non-finite state at t = {t}: {context}")]
    NonFiniteState { t: f64, context: &'static str },

    #[error("CLF premise violated at x (|x| = {norm:.6e}): a(x) = {a:.6e} >= 0 while b(x) = 0")]
    ClfPremiseViolated { norm: f64, a: f64 },

    #[error("proximal minimization did not converge at x (|x| = {0:.6e})")]
    NonConvergence(f64),

    #[error("inverse evaluated outside the function's range: {0}")]
    OutsideRange(f64),

    #[error("trajectory bundle contains an escaped trajectory (index {0})")]
    UnboundedBundle(usize),

    #[error("precondition failed: {0}")]
    PreconditionFailed(String),

    #[error("matrix is not Hurwitz (max eigenvalue real part = {0:.6e})")]
    NotHurwitz(f64),

    #[error("classical ODE semantics refused for a measurable-discontinuous feedback law; use a sampled (pi-) trajectory instead")]
    RefusedDiscontinuous,

    #[error("coordinate-change consistency check failed: |T_inv(T(z)) - z| = {0:.6e}")]
    InverseConsistency(f64),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable tag, used by the CLI's JSON error stream.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NotAffine(_) => "not_affine",
            Error::UnknownSystem(_) => "unknown_system",
            Error::InvalidParams(_) => "invalid_params",
            Error::NonFiniteState { .. } => "non_finite_state",
            Error::ClfPremiseViolated { .. } => "clf_premise_violated",
            Error::NonConvergence(_) => "non_convergence",
            Error::OutsideRange(_) => "outside_range",
            Error::UnboundedBundle(_) => "unbounded_bundle",
            Error::PreconditionFailed(_) => "precondition_failed",
            Error::NotHurwitz(_) => "not_hurwitz",
            Error::RefusedDiscontinuous => "refused_discontinuous",
            Error::InverseConsistency(_) => "inverse_consistency",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
