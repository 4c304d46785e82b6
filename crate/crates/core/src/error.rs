use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the simulation and reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("grid mismatch between {0}")]
    GridMismatch(&'static str),

    #[error(
        "Fresnel propagation by |z| = {z:.3e} m would alias on this grid; maximum safe |z| is {max_safe:.3e} m"
    )]
    Aliasing { z: f64, max_safe: f64 },

    #[error("mode {index} out of range for a source with {modes} modes")]
    ModeIndex { index: usize, modes: usize },

    #[error("mode {index}: {source}")]
    ModePropagation {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("negative intensity {value} at pixel ({row}, {col})")]
    NegativeIntensity { value: f64, row: usize, col: usize },

    #[error("non-positive on-focus intensity at pixel ({row}, {col})")]
    NonPositiveIntensity { row: usize, col: usize },

    #[error("degenerate statistics: {0}")]
    Degenerate(String),

    #[error("raster mask {path}: {reason}")]
    Raster { path: PathBuf, reason: String },

    #[error("configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
