use std::path::PathBuf;

use thiserror::Error;

use crate::nav::Cell;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid action id {0} (expected 0..=7)")]
    InvalidAction(u8),

    #[error("cannot step from a terminal state ({0:?})")]
    SteppedTerminal(crate::nav::Terminal),

    #[error("malformed trajectory: {0}")]
    MalformedTrajectory(String),

    #[error("invalid world: {0}")]
    InvalidWorld(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("cell {cell:?} lies outside the {size}x{size} grid")]
    OutOfGrid { cell: Cell, size: usize },

    #[error("no optimal action at {0:?}: {1}")]
    NoOptimalAction(Cell, &'static str),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("label row {0} is not one-hot")]
    NotOneHot(usize),

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unknown architecture `{0}` (expected dbnet, b1net, b2net or vin)")]
    UnknownArch(String),

    #[error("empty sample split")]
    EmptySplit,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
