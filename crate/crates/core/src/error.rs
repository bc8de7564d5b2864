use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = RapfError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum RapfError {
    #[error("format error: {0}")]
    Format(String),

    #[error("integrity error: class {class_id} ({name:?}): {detail}")]
    Integrity {
        class_id: u32,
        name: String,
        detail: String,
    },

    #[error("corrupt embedding file: {0}")]
    Corruption(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("degenerate projection: adapter maps the feature to the zero vector")]
    DegenerateProjection,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("data error: {0}")]
    Data(String),

    /// Wraps an error from one step of a multi-seed run.
    #[error("seed {seed}, task {task}: {source}")]
    Run {
        seed: u64,
        task: usize,
        #[source]
        source: Box<RapfError>,
    },
}

impl RapfError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RapfError::Io {
            path: path.into(),
            source,
        }
    }
}
