use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),

    #[error("pixel ({u}, {v}) with depth {depth} cannot be backprojected")]
    RejectedPixel { u: f64, v: f64, depth: f64 },

    #[error("rotation angle is at pi; the logarithm branch is ambiguous")]
    DegenerateLog,

    #[error("need more than {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("tracking lost: only {0} correspondences")]
    TrackingLost(usize),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("unknown keyframe {0}")]
    UnknownKeyframe(u64),

    #[error("pose graph is disconnected")]
    DisconnectedGraph,

    #[error("zero query vector")]
    ZeroQuery,

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("parse error in {file} line {line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
