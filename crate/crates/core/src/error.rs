use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("coefficient bound violated at step {step}: norm {norm:.6e} exceeds K = {bound:.6e}")]
    BoundViolation { step: usize, norm: f64, bound: f64 },

    #[error("process is not adapted: value at step {step} depends on later noise increments")]
    NotAdapted { step: usize },

    #[error("coefficients depend on x; the spectral solver needs x-independent coefficients")]
    NotXIndependent,

    #[error("operator is not elliptic: margin {margin:.6e} <= 0")]
    NotElliptic { margin: f64 },

    #[error("numerical blow-up in {stage} at step {step}: norm growth {growth:.3e}")]
    BlowUp { stage: &'static str, step: usize, growth: f64 },

    #[error(
        "contraction condition fails: K_det*L_F + K_st*L_G = {product:.4} (K_det = {k_det:.4}, K_st = {k_st:.4})"
    )]
    PicardRefused { k_det: f64, k_st: f64, product: f64 },

    #[error("Picard iteration stagnated above tolerance after {iterations} iterations (last residual {last:.3e})")]
    PicardDiverged { iterations: usize, last: f64, residuals: Vec<f64> },

    #[error("declared Lipschitz constant violated: {0}")]
    LipschitzViolation(String),

    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("decode error: {0}")]
    Decode(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
