use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("misuse: {0}")]
    Misuse(String),
    #[error("upcycle plan error: {0}")]
    Plan(String),
    #[error("comparison error: {0}")]
    Comparison(String),
    #[error("optimizer error: {0}")]
    Optimizer(String),
    #[error("non-finite {term} loss at step {step}: {value}")]
    NonFinite {
        term: &'static str,
        step: u64,
        value: f64,
    },
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
