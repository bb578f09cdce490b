use std::path::PathBuf;

/// Errors produced anywhere in the synthesis and remapping pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A point cannot be projected by the pinhole model.
    #[error("projection singular: depth {depth} mm is zero or on the wrong side of the camera")]
    ProjectionSingular { depth: f64 },

    /// Geometric precondition failed (e.g. a particle too close to the camera).
    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("displacement field has no nodes")]
    EmptyField,

    #[error("node {index} lies outside the declared extent")]
    OutOfExtent { index: usize },

    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: String, found: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("record {id}: {source}")]
    Record {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    /// True for errors caused by the numbers of one sample rather than by the
    /// environment (I/O, serialization).
    pub fn is_math(&self) -> bool {
        match self {
            Error::Io(_) | Error::Json(_) | Error::Csv(_) => false,
            Error::Record { source, .. } => source.is_math(),
            _ => true,
        }
    }
}
