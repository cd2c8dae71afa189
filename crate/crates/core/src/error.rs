use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = AtmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AtmError {
    /// A caller broke an operation's precondition (shape, arity, ranges).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced at node {node} ({op})")]
    NumericFailure { node: usize, op: &'static str },

    #[error("wav format error in field `{field}`: {detail}")]
    WavFormat { field: &'static str, detail: String },

    #[error("unsupported sample rate {0} Hz (expected 16000)")]
    SampleRate(u32),

    #[error("input too short: {0}")]
    Length(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("infeasible CTC alignment: {frames} frames cannot emit {required} required states")]
    InfeasibleAlignment { frames: usize, required: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("step {step}: {source}")]
    AtStep {
        step: u64,
        #[source]
        source: Box<AtmError>,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl AtmError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AtmError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn at_step(step: u64, source: AtmError) -> Self {
        AtmError::AtStep {
            step,
            source: Box::new(source),
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        AtmError::Json {
            path: path.into(),
            source,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::AtmError::$variant(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
