use std::path::PathBuf;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid noise schedule: {0}")]
    Schedule(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numeric guard: {0}")]
    Numeric(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("non-finite loss term `{term}` at step {step}")]
    NonFiniteLoss { term: &'static str, step: u64 },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing manifest in {0}")]
    MissingManifest(PathBuf),

    #[error("format version mismatch in {path}: found {found}, expected {expected}")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("truncated file {path}: {reason}")]
    Truncated { path: PathBuf, reason: String },

    #[error("digest mismatch in {path}: stored {stored:016x}, computed {computed:016x}")]
    DigestMismatch {
        path: PathBuf,
        stored: u64,
        computed: u64,
    },

    #[error("checkpoint does not match configuration: {0}")]
    CheckpointMismatch(String),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! ensure_arg {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::Error::Argument(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure_arg;
