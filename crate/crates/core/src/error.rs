use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt payload: {0}")]
    Corrupt(String),

    #[error("validation error: {0}")]
    Validation(String),

    /// A precondition on an input object (e.g. its stochasticity) was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("iterative proportional fitting did not converge after {rounds} rounds (residual {residual:.3e})")]
    Convergence { rounds: usize, residual: f64 },

    #[error("non-finite value at markov iteration {iteration}")]
    Numeric { iteration: usize },

    #[error("invalid state: {0}")]
    State(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
