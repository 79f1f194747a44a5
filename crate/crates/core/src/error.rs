use thiserror::Error;

/// Errors raised by the physics model, the integrators and the fitters.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("invalid spin state: {0}")]
    InvalidState(String),

    /// The requested operation needs an exponentially decaying transverse
    /// polarization (Γ + ξ > 0) or, for maser runs, the opposite.
    #[error("regime error: {0}")]
    Regime(String),

    #[error("integration failed at t = {t} s: {reason}")]
    Integration { t: f64, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("rank-deficient fit: {0}")]
    Rank(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("record too short for requested resolution: {0}")]
    Resolution(String),

    #[error("fit did not converge after {iterations} iterations (rms residual {residual_rms:e})")]
    NotConverged {
        iterations: usize,
        residual_rms: f64,
    },

    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
