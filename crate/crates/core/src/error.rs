//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid camera intrinsics: {0}")]
    BadIntrinsics(String),

    #[error("invalid depth value {0} (expected finite and > 0)")]
    InvalidDepth(f64),

    #[error("empty crop: no hand pixel falls inside the cube")]
    EmptyCrop,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("joint {joint} has no pixel support to decode from")]
    UndecodableJoint { joint: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("render failed: {0}")]
    Render(String),

    #[error("duplicate run name in report: {0}")]
    DuplicateRun(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
