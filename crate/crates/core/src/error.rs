use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("failed to load {file}: {source}")]
    Load {
        file: String,
        #[source]
        source: std::io::Error,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("parse error in {file} at row {row}, column {col}: {msg}")]
    Parse {
        file: String,
        row: usize,
        col: usize,
        msg: String,
    },

    #[error("value out of range: {0}")]
    Range(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("numeric guard: {0}")]
    NumericGuard(String),

    #[error("contrastive loss needs at least 2 samples per batch, got {0}")]
    NoNegatives(usize),

    #[error("infeasible clustering: {0}")]
    Infeasible(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("stage error: {0}")]
    Stage(String),

    #[error("non-finite {component} loss at epoch {epoch}, batch {batch}")]
    NonFinite {
        component: &'static str,
        epoch: usize,
        batch: usize,
    },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
