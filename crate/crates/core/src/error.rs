use thiserror::Error;

/// Errors raised across the simulation, Malliavin and estimation layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("time {t} is not a grid node (nearest node {nearest} at t = {nearest_time})")]
    NotAGridNode {
        t: f64,
        nearest: usize,
        nearest_time: f64,
    },

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("trajectory blew up at step {step}")]
    BlowUp { step: usize },

    #[error("near-singular Malliavin covariance (condition number {condition:.3e})")]
    NearSingular { condition: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("score provider has no value at node {node} (t = {t})")]
    ScoreGap { node: usize, t: f64 },

    #[error("oracle failure: {0}")]
    Oracle(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
