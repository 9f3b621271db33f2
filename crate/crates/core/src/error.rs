use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("tabulated kernel queried at r = {r} outside sample range [{lo}, {hi}]")]
    Extrapolation { r: f64, lo: f64, hi: f64 },

    #[error("insufficient resolution: {0}")]
    InsufficientResolution(String),

    #[error("convolution matrix with {rows}x{cols} entries exceeds the cap of {cap}")]
    MatrixTooLarge { rows: usize, cols: usize, cap: usize },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid exponent p = {0}; need p >= 1")]
    InvalidExponent(f64),

    #[error("domain too small: {clipped:.3e} of mass {mass:.6e} falls outside R_max = {r_max}")]
    DomainTooSmall { clipped: f64, mass: f64, r_max: f64 },

    #[error("mass mismatch: field carries {actual}, expected {expected}")]
    MassMismatch { expected: f64, actual: f64 },

    #[error("invalid configuration at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("fit error: {0}")]
    Fit(String),

    #[error("malformed input in {path} line {line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
