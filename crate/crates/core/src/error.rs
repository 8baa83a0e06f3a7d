use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rotation angle {angle} rad is within 1e-6 of pi; log map is ill-conditioned")]
    NearPiRotation { angle: f64 },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),

    #[error("descriptor has (near) zero norm")]
    ZeroVector,

    #[error("descriptor dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("window of {0} keyframes exceeds the exhaustive search limit of 16")]
    WindowTooLarge(usize),

    #[error("consecutive keyframes {a} and {b} are coincident (gap < 1e-9 m)")]
    CoincidentPoses { a: u64, b: u64 },

    #[error("subset needs at least {needed} keyframes, got {got}")]
    SubsetTooSmall { needed: usize, got: usize },

    #[error("keyframe {id} arrived after {prev}; streams must be in increasing id order")]
    OutOfOrder { prev: u64, id: u64 },

    #[error("keyframe {id} has no `{channel}` channel")]
    MissingChannel { id: u64, channel: &'static str },

    #[error("keyframe id {0} already present in the database")]
    DuplicateId(u64),

    #[error("no ground-truth pose for keyframe {0}")]
    MissingGroundTruth(u64),

    #[error("damped normal equations could not be solved: {0}")]
    SingularSystem(String),

    #[error("too few poses: need {needed}, got {got}")]
    TooFewPoses { needed: usize, got: usize },

    #[error("baseline error is zero; improvement undefined")]
    ZeroBaseline,

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("count mismatch: {what} ({left} vs {right})")]
    CountMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("bad magic in descriptor file {0}")]
    BadMagic(PathBuf),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    /// True when the error originates from configuration validation rather
    /// than from a pipeline stage.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Json(_))
    }
}

/// Attach the offending path to an I/O error.
pub(crate) trait PathContext<T> {
    fn at(self, path: &std::path::Path) -> Result<T>;
}

impl<T> PathContext<T> for std::io::Result<T> {
    fn at(self, path: &std::path::Path) -> Result<T> {
        self.map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Attach the failing stage name to an error.
pub(crate) trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| match e {
            Error::Stage { .. } => e,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        })
    }
}
