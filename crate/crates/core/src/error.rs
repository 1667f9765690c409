use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("corrupt checkpoint: field `{field}`: {detail}")]
    CorruptCheckpoint { field: String, detail: String },

    #[error("malformed image: {0}")]
    Image(String),

    /// `line` is 1-based; `None` for overrides and whole-config checks.
    #[error("config error{}: {detail}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Config { line: Option<usize>, detail: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn corrupt(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::CorruptCheckpoint {
            field: field.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
