use std::io;

use thiserror::Error;

/// Errors produced anywhere in the caching pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("trajectory diverged at step {step}")]
    Diverged { step: usize },

    #[error("calibration sample {sample} diverged at step {step}")]
    CalibrationDiverged { sample: usize, step: usize },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("sensitivity profile is empty")]
    EmptyProfile,

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Coarse error class, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Numeric,
    Io,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::GridMismatch(_) | Error::Parse(_) | Error::EmptyProfile => {
                ErrorClass::Config
            }
            Error::Io(_) => ErrorClass::Io,
            _ => ErrorClass::Numeric,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
