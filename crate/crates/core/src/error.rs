use thiserror::Error;

/// Errors produced by the attack laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("unknown architecture '{name}', valid names: {valid:?}")]
    UnknownArch { name: String, valid: Vec<&'static str> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("corrupt header: {0}")]
    CorruptHeader(String),

    #[error("checkpoint format version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated blob: tensor '{name}' needs {needed} bytes, {available} available")]
    TruncatedBlob {
        name: String,
        needed: usize,
        available: usize,
    },

    #[error("arch mismatch: checkpoint holds '{found}', requested '{expected}'")]
    ArchMismatch { expected: String, found: String },

    #[error("checkpoint kind mismatch: holds '{found}', requested '{expected}'")]
    KindMismatch { expected: String, found: String },

    #[error("wrong magic in {path}: found {found:#010x}, expected {expected:#010x}")]
    WrongMagic {
        path: String,
        found: u32,
        expected: u32,
    },

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("perturbation budget violated: image {index} has |x' - x| = {observed}, budget {budget}")]
    BudgetViolation {
        index: usize,
        observed: f32,
        budget: f32,
    },

    #[error("training diverged: loss became non-finite at {0}")]
    Divergence(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(
        context: impl Into<String>,
        expected: &[usize],
        actual: &[usize],
    ) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
