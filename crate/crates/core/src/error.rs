use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("events are not sorted by timestamp (index {index}: {prev} > {next})")]
    UnsortedEvents { index: usize, prev: u64, next: u64 },

    #[error("event {index} at ({x}, {y}) outside sensor {width}x{height}")]
    OutOfBounds {
        index: usize,
        x: u32,
        y: u32,
        width: usize,
        height: usize,
    },

    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("tape has already been replayed")]
    TapeSpent,

    #[error("degenerate geometry: {0}")]
    Geometry(String),

    #[error("duplicate or decreasing timestamp at index {0}")]
    Timestamps(usize),

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("training diverged at epoch {epoch} (loss {loss}); recent epoch losses: {recent:?}")]
    DivergedRun { epoch: usize, loss: f64, recent: Vec<f64> },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn ensure_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            actual,
        })
    }
}
