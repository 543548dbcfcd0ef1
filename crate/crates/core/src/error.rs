use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("label {label} outside range 0..{classes}")]
    Label { label: usize, classes: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("knowledge base is empty")]
    EmptyKnowledgeBase,

    #[error("task {0} is already committed")]
    DuplicateTask(usize),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: String, expected: u32 },

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("task {task}: {source}")]
    InTask {
        task: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_task(task: usize, source: Error) -> Self {
        Error::InTask {
            task,
            source: Box::new(source),
        }
    }

    /// Process exit code: 2 configuration, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::NotSpd(_) | Error::Numerical(_) => 4,
            Error::InTask { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}
