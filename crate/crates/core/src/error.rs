use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed binary file (bad magic, unsupported version, truncation).
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    /// Manifest problem, with record context.
    #[error("manifest {context}: {message}")]
    Manifest { context: String, message: String },

    #[error("empty sequence: a feature sequence needs at least one frame")]
    EmptySequence,

    #[error("non-finite feature value at frame {frame}, column {column}")]
    NonFinite { frame: usize, column: usize },

    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("frame range [{a}, {b}] out of range for a {t}-frame sequence")]
    FrameRange { a: usize, b: usize, t: usize },

    #[error("class index {index} out of range for {n} classes")]
    ClassOutOfRange { index: usize, n: usize },

    #[error("segmentation (z_p={z_p}, z_e={z_e}) violates the latent window for t={t}")]
    InvalidSegmentation { z_p: usize, z_e: usize, t: usize },

    #[error(
        "latent window empty for t={t}: supported sequence lengths are 3, 5 and anything >= 6 (minimum 3)"
    )]
    EmptyLatentRange { t: usize },

    #[error("degenerate embedding: norm {norm:e} is below the 1e-12 floor")]
    DegenerateEmbedding { norm: f64 },

    #[error("video {video_id}: {source}")]
    Video {
        video_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite gradient in parameter group {group}")]
    NonFiniteGradient { group: String },

    #[error("analytic gradient disagrees with finite differences: relative error {max_rel_error:.3e} >= {tolerance:.0e}")]
    GradientMismatch { max_rel_error: f64, tolerance: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty gallery{0}")]
    EmptyGallery(&'static str),

    #[error("score tables disagree: {0}")]
    ScoreMismatch(String),

    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },

    #[error("{path}: json: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn in_video(self, video_id: &str) -> Self {
        Error::Video {
            video_id: video_id.to_string(),
            source: Box::new(self),
        }
    }

    /// True for failures of the numerics (degenerate embeddings, non-finite
    /// gradients) as opposed to bad input or configuration.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::DegenerateEmbedding { .. }
            | Error::NonFiniteGradient { .. }
            | Error::GradientMismatch { .. } => true,
            Error::Video { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}
