use thiserror::Error;

/// Errors produced by pulsekit operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid pulse shape: {0}")]
    InvalidShape(String),
    #[error("degenerate pulse")]
    DegeneratePulse,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("ill-posed inverse: pulse spectrum has zeros and no regularisation was given")]
    IllPosedInverse,
    #[error("degenerate placement: arrival times are numerically coincident (condition number {0:.3e})")]
    DegeneratePlacement(f64),
    #[error("overparameterized: {pulses} pulses for {samples} samples")]
    Overparameterized { pulses: usize, samples: usize },
    #[error("every candidate fit failed")]
    AllFitsFailed,
    #[error("histogram is not normalized (total mass {0})")]
    NotNormalized(f64),
    #[error("saturation: pile-up probability q = {0} is not below 1")]
    Saturation(f64),
    #[error("too many pulses per interval (mu = {0}); log unwrapping is unreliable above 20")]
    TooManyPulses(f64),
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error("histogram edges do not match")]
    MismatchedEdges,
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
