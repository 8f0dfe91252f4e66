use std::path::PathBuf;

/// Error type shared by every stage of the pipeline.
///
/// Variants are grouped by how the CLI maps them to exit codes:
/// configuration problems, data problems, and numerical failures.
#[derive(Debug, thiserror::Error)]
pub enum CpmError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("requested dimension {requested} exceeds the attainable rank {attainable}")]
    RankDeficiency { requested: usize, attainable: usize },

    #[error("degenerate geometry: {0}")]
    Degeneracy(String),

    #[error("infeasible start: {0}")]
    Infeasible(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("labels required: {0}")]
    LabelsRequired(String),

    #[error("unknown utterance id {0}")]
    UnknownUtterance(usize),
}

impl CpmError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CpmError::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code category used by the CLI: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            CpmError::Config(_) => 2,
            CpmError::Io { .. }
            | CpmError::Format { .. }
            | CpmError::Shape(_)
            | CpmError::LabelsRequired(_)
            | CpmError::UnknownUtterance(_) => 3,
            CpmError::RankDeficiency { .. }
            | CpmError::Degeneracy(_)
            | CpmError::Infeasible(_)
            | CpmError::Numerical(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, CpmError>;
