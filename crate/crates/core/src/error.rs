//! Error type shared across the engine.
//!
//! Configuration problems (bad fields, malformed config files) are
//! distinguished from runtime failures because the CLI maps them to
//! different exit codes (2 vs 3).

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A config field failed validation. `field` names the offending key.
    #[error("config error: field `{field}`: {message}")]
    Config { field: String, message: String },

    /// Noise schedule construction rejected its parameters.
    #[error("schedule error: {0}")]
    Schedule(String),

    /// A timestep or step count fell outside the valid range.
    #[error("range error: {0}")]
    Range(String),

    /// Tensor shapes disagree.
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    /// Window layout or crop geometry does not tile the panorama.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// A sampler was asked for a transition it does not support
    /// (e.g. a non-adjacent DDPM step).
    #[error("unsupported transition: {0}")]
    UnsupportedTransition(String),

    /// A derived variance came out negative (bad eta / plan combination).
    #[error("variance error: {0}")]
    Variance(String),

    /// A numeric routine left its supported domain (NaN/Inf, underflow).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at iteration {iteration}: {message}")]
    TrainingDiverged { iteration: usize, message: String },

    /// Malformed tensor or checkpoint file.
    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(field: &str, message: impl Into<String>) -> Self {
        Error::Config { field: field.to_string(), message: message.into() }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Exit code the CLI should use for this error: 2 for configuration
    /// problems, 3 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            _ => 3,
        }
    }
}
