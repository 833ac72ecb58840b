use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("basis level {index_level} exceeds path resolution {path_level}")]
    ResolutionMismatch { index_level: u32, path_level: u32 },

    #[error("point outside the density domain: {0}")]
    DomainViolation(String),

    #[error("sampler failure: {0}")]
    Sampler(String),

    #[error("density envelope violated: m = {value} > envelope {envelope}")]
    EnvelopeViolation { value: f64, envelope: f64 },

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("shift {0} is not a multiple of the grid step")]
    NonGridShift(f64),

    #[error("fixed point did not converge after {iterations} iterations (residual {residual:e})")]
    FixedPoint { iterations: usize, residual: f64 },

    #[error("ODE step rejected at s = {s}: half-step disagreement {error:e} exceeds {tolerance:e}")]
    StepRejected { s: f64, error: f64, tolerance: f64 },

    #[error("unsupported integrand: {0}")]
    Unsupported(String),
}
