use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("input too small: {0}")]
    Size(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed image: {0}")]
    Image(String),

    #[error("not a weight file (bad magic {0:?})")]
    BadMagic([u8; 4]),

    #[error("unsupported weight file version {0}")]
    UnsupportedVersion(u32),

    #[error("weight file checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },

    #[error("malformed weight file: {0}")]
    WeightFormat(String),

    #[error("tensor `{name}` has extents {found:?}, expected {expected:?}")]
    Extent {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("weight file is missing tensor `{0}`")]
    MissingTensor(String),

    #[error("weight file has unexpected tensor `{0}`")]
    UnexpectedTensor(String),

    #[error("{path}: {source}")]
    Path {
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
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn at_path(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Path {
            path: path.into(),
            source,
        }
    }
}
