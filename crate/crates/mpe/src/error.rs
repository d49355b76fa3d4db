//! Error types shared across the crate.
//!
//! Three broad categories map onto the CLI exit codes: configuration /
//! usage problems, data problems (files, corpora, episodes), and numeric
//! failures (shape mismatches, non-finite values).

use thiserror::Error;

/// Tensor and autodiff failures.
#[derive(Debug, Error)]
pub enum NumericError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("bad tensor format: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Corpus, episode, and model-file failures.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("parse error at {locator}: {message}")]
    Parse { locator: String, message: String },
    #[error("validation error at {locator}: {message}")]
    Validation { locator: String, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl DataError {
    pub fn parse(locator: impl Into<String>, message: impl Into<String>) -> Self {
        DataError::Parse {
            locator: locator.into(),
            message: message.into(),
        }
    }

    pub fn validation(locator: impl Into<String>, message: impl Into<String>) -> Self {
        DataError::Validation {
            locator: locator.into(),
            message: message.into(),
        }
    }
}

/// Run-configuration failures (strict parsing: unknown keys are errors).
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown section `[{0}]`")]
    UnknownSection(String),
    #[error("unknown key `{key}` in section [{section}]")]
    UnknownKey { section: String, key: String },
    #[error("bad value for `{key}` in section [{section}]: {message}")]
    BadValue {
        section: String,
        key: String,
        message: String,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Umbrella error for orchestration layers (training, evaluation, CLI).
#[derive(Debug, Error)]
pub enum MpeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

impl MpeError {
    /// CLI exit code for this error category: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            MpeError::Config(_) => 1,
            MpeError::Data(_) => 2,
            MpeError::Numeric(_) => 3,
        }
    }
}
