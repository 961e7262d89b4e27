use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown {kind} {id}")]
    Lookup { kind: &'static str, id: usize },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid label {label}: expected a slot in 0..={max}")]
    InvalidLabel { label: usize, max: usize },

    #[error("training diverged at epoch {epoch}: {reason}")]
    TrainingFailure { epoch: usize, reason: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{}: {source}", path.display())]
    File {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }

    pub(crate) fn dataset(message: impl Into<String>) -> Self {
        Error::InvalidDataset(message.into())
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse { line, message: message.into() }
    }

    /// Reads a whole file, naming it in the error.
    pub fn read_text(path: impl AsRef<std::path::Path>) -> Result<String> {
        let path = path.as_ref();
        std::fs::read_to_string(path).map_err(|source| Error::File { path: path.to_path_buf(), source })
    }

    /// Tags an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            staged @ Error::Stage { .. } => staged,
            other => Error::Stage { stage, source: Box::new(other) },
        }
    }
}
