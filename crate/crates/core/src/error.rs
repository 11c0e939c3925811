use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid value for `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("unknown node {0}")]
    UnknownNode(u32),

    #[error("no provider among an empty candidate set")]
    NoProvider,

    #[error("analytic domain error: {0}")]
    Domain(&'static str),

    #[error("configuration does not match the analytic model: {0}")]
    Mismatch(String),

    #[error("run {index} failed: {source}")]
    Run {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig { field: field.into(), reason: reason.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
