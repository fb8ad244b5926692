use std::path::PathBuf;

/// Errors surfaced by the texture-synthesis pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("atlas overflow: faces do not fit a {budget}x{budget} atlas; required budget is {required}")]
    AtlasOverflow { budget: u32, required: u32 },

    #[error("viewpoint sampling failed for camera {index}: {constraint}")]
    Viewpoints { index: usize, constraint: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unsupported format version: expected {expected}, found {found}")]
    Version { expected: String, found: String },

    #[error("unknown section `{0}`")]
    UnknownSection(String),

    #[error("bad magic: expected {expected}, found {found:?}")]
    Magic { expected: &'static str, found: Vec<u8> },

    #[error("empty image")]
    EmptyImage,

    #[error("uninitialized teacher: {0}")]
    UninitializedTeacher(String),

    #[error("non-finite value at iteration {iteration}: {what}")]
    NonFinite { iteration: u64, what: String },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
