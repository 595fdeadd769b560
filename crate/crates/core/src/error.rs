use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("decode error at record {record}: {reason}")]
    Decode { record: usize, reason: String },

    #[error("invalid scene: {0}")]
    Scene(String),

    #[error("event {index} at ({x}, {y}) lies outside the {rows}x{cols} window grid at stride {stride}")]
    OutOfBounds {
        index: usize,
        x: u16,
        y: u16,
        rows: usize,
        cols: usize,
        stride: usize,
    },

    #[error("stale down-write message for level {level}: stamped at version {stamp}, state is at {current}")]
    StaleMessage { level: usize, stamp: u64, current: u64 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown {what}: {name}")]
    Unknown { what: &'static str, name: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("worker failure: {0}")]
    Worker(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Short machine-readable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Decode { .. } => "decode",
            Error::Scene(_) => "scene",
            Error::OutOfBounds { .. } => "out_of_bounds",
            Error::StaleMessage { .. } => "stale_message",
            Error::Config(_) => "config",
            Error::Unknown { .. } => "unknown",
            Error::NonFinite(_) => "non_finite",
            Error::Checkpoint(_) => "checkpoint",
            Error::Worker(_) => "worker",
        }
    }
}
