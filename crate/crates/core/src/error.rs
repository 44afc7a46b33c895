use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid spec{}: {msg}", layer.map(|i| format!(" at layer {i}")).unwrap_or_default())]
    InvalidSpec { layer: Option<usize>, msg: String },

    #[error("state error: {0}")]
    State(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("training diverged at iteration {iteration}: {loss} is not finite")]
    Divergence { iteration: u64, loss: &'static str },

    #[error("insufficient data: class {class} has {count} samples (need at least 2)")]
    InsufficientData { class: usize, count: usize },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("shape mismatch for tensor `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn spec(layer: Option<usize>, msg: impl Into<String>) -> Self {
        Error::InvalidSpec {
            layer,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
