use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("attention mask leaves query row {row} with no visible key")]
    DegenerateMask { row: usize },

    #[error("infeasible CTC alignment: {frames} frames cannot emit target of length {target_len} with {repeats} repeats")]
    InfeasibleAlignment {
        frames: usize,
        target_len: usize,
        repeats: usize,
    },

    #[error("signal has zero power; SNR is undefined")]
    DegenerateSignal,

    #[error("degenerate rollout: {0}")]
    DegenerateRollout(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed file: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("checkpoint does not match configuration: {0}")]
    Mismatch(String),

    #[error("non-finite loss at epoch {epoch}, utterance {utterance}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        utterance: String,
        detail: String,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
