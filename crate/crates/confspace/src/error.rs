use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },
    #[error("geodesic step of length {length} exceeds the admissible bound {bound}")]
    StepTooLarge { length: f64, bound: f64 },
    #[error("density is not integrable over the requested window")]
    Divergence,
    #[error("quadrature did not converge (last relative change {0:e})")]
    QuadratureNotConverged(f64),
    #[error("series tail bound {bound:e} above tolerance {tol:e}; need K >= {required_k}")]
    Truncation { bound: f64, tol: f64, required_k: usize },
    #[error("added points meet the configuration")]
    UndefinedPoint,
    #[error("non-finite state at step {step}")]
    BlowUp { step: usize },
    #[error("finite-difference step {0:e} outside [1e-6, 1e-2]")]
    FdStep(f64),
    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;
