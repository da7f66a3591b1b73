use std::path::PathBuf;

use thiserror::Error;

use crate::optimizer::OptimizationTrace;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty object: mask has no foreground pixel")]
    EmptyObject,

    #[error("invalid box ({xl}, {yt}, {xr}, {yb}): need xl < xr and yt < yb")]
    InvalidBox { xl: f64, yt: f64, xr: f64, yb: f64 },

    #[error("degenerate decoded box ({xl}, {yt}, {xr}, {yb})")]
    DegenerateBox { xl: f64, yt: f64, xr: f64, yb: f64 },

    #[error("empty input vector")]
    EmptyInput,

    #[error("non-finite input at index {index}")]
    NonFiniteInput { index: usize },

    #[error("relative coordinate ({r1}, {r2}) outside the open unit square")]
    OutOfUnitSquare { r1: f64, r2: f64 },

    #[error("no candidate location for the prediction search")]
    EmptySelection,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss {
        step: usize,
        trace: Box<OptimizationTrace>,
    },

    #[error("parse error in {path}: {message} (at {position})")]
    Parse {
        path: PathBuf,
        position: String,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(
        path: impl Into<PathBuf>,
        position: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        Error::Parse {
            path: path.into(),
            position: position.into(),
            message: message.into(),
        }
    }
}
