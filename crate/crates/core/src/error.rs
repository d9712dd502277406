use thiserror::Error;

/// Errors raised by the numerical laboratory.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    Domain(String),

    #[error("invalid model: {0}")]
    Validation(String),

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("reducible generator")]
    Reducible,

    #[error("no real Perron root: {0}")]
    NoPerronRoot(String),

    #[error("not subcritical: lambda = {0}")]
    NotSubcritical(f64),

    #[error("step size underflow at t = {t} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64 },

    #[error("extinction function diverges; finite-time extinction (H2) appears to fail (relative change {last_change:e} at cap {cap:e})")]
    Divergence { cap: f64, last_change: f64 },

    #[error("no convergence before t = {t_max}: last two values {prev} and {last}")]
    NonConvergence { t_max: f64, prev: f64, last: f64 },

    #[error("no QSD exists for r < lambda (r = {r}, lambda = {lambda})")]
    NoQsd { r: f64, lambda: f64 },

    #[error("conditioning impossible at this horizon/sample size: {0}")]
    Conditioning(String),

    #[error("empty ensemble")]
    EmptyEnsemble,

    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
