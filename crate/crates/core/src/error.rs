use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the segmentation and volumetry pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("malformed MetaImage header: {0}")]
    Header(String),
    #[error("unsupported element type `{0}` (expected MET_UCHAR or MET_FLOAT)")]
    UnsupportedElementType(String),
    #[error("payload length mismatch: header implies {expected} bytes, file has {found}")]
    PayloadLength { expected: usize, found: usize },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("volume has no non-zero voxels")]
    EmptyVolume,
    #[error("no skull voxels detected")]
    NoSkullDetected,
    #[error("degenerate point cloud: {0}")]
    Degenerate(String),
    #[error("empty overlap between fixed and moving images")]
    EmptyOverlap,
    #[error("empty label")]
    EmptyLabel,
    #[error("mesh is not watertight: {0}")]
    NotWatertight(String),
    #[error("mesh encloses no volume")]
    EmptyInterior,
    #[error("label map has no probability channel")]
    MissingProbability,
    #[error("malformed PLY file: {0}")]
    Ply(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Tag an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
