use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("dataset at {0} is incomplete (interrupted write)")]
    Incomplete(PathBuf),

    #[error("manifest line {line}: {reason} ({content:?})")]
    ManifestParse { line: usize, content: String, reason: String },

    #[error("{video}: missing frame file {frame}")]
    MissingFrame { video: String, frame: usize },

    #[error("{path}:{line}: malformed annotation: {message}")]
    AnnotationParse { path: PathBuf, line: usize, message: String },

    #[error("{path}:{line}: invalid annotation: {message}")]
    Validation { path: PathBuf, line: usize, message: String },

    #[error("{video}: annotation references frame {frame} but only {frames} frames exist")]
    FrameCountMismatch { video: String, frame: usize, frames: usize },

    #[error("video has {frames} frames, shorter than the {window}-frame window")]
    VideoTooShort { frames: usize, window: usize },

    #[error("degenerate box {0:?}")]
    DegenerateBox([f64; 4]),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("loss component {0} is not finite")]
    NonFinite(&'static str),

    #[error("training diverged at step {iteration}: {component} is not finite")]
    Diverged { iteration: usize, component: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
