use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {op} got {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("patch conflict: {0}")]
    Conflict(String),

    #[error("cannot parse hook id {input:?}: unexpected token {token:?}")]
    HookParse { input: String, token: String },

    #[error("path graph error: {0}")]
    Graph(String),

    #[error("degenerate baseline: clean {clean} and corrupt {corrupt} do not differ under this metric")]
    Degenerate { clean: f64, corrupt: f64 },

    #[error("metric {metric}: {source}")]
    Metric {
        metric: String,
        #[source]
        source: Box<Error>,
    },

    #[error("config error at {path}: {message}")]
    Config { path: String, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
