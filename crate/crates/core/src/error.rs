use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
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

    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("clip {clip_id}: missing annotation file {path}")]
    MissingAnnotations { clip_id: String, path: PathBuf },

    #[error("clip {clip_id}: {frames} frame images but {annotations} annotations")]
    CountMismatch {
        clip_id: String,
        frames: usize,
        annotations: usize,
    },

    #[error("clip {clip_id}: frame {frame}: {what} level {value} outside [-10, 10]")]
    LabelRange {
        clip_id: String,
        frame: usize,
        what: &'static str,
        value: i64,
    },

    #[error("clip {clip_id}: frame {frame}: expected 68 landmarks, found {found}")]
    LandmarkCount {
        clip_id: String,
        frame: usize,
        found: usize,
    },

    #[error("clip {clip_id}: {reason}")]
    MalformedClip { clip_id: String, reason: String },

    #[error("level {0} outside [-10, 10]")]
    LevelOutOfRange(i64),

    #[error("degenerate box ({x0}, {y0})-({x1}, {y1})")]
    DegenerateBox { x0: f64, y0: f64, x1: f64, y1: f64 },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("degenerate CCC denominator (both series constant with equal means)")]
    DegenerateCcc,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint version {found} is incompatible with {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
