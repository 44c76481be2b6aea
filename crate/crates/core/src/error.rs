use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}:{line}: {message}", file.display())]
    Parse { file: PathBuf, line: usize, message: String },

    #[error("knowledge graph integrity: unlabeled ids referenced by triples: {}", offenders.join(", "))]
    Integrity { offenders: Vec<String> },

    #[error("validation failed for {context}: {message}")]
    Validation { context: String, message: String },

    #[error("unknown relation label {label:?} in bag {bag_id}")]
    Vocabulary { bag_id: String, label: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("provenance mismatch: {0}")]
    Provenance(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn validation(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation { context: context.into(), message: message.into() }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    /// Process exit code for the CLI: 2 for bad input, 3 for numerical failure, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. }
            | Error::Integrity { .. }
            | Error::Validation { .. }
            | Error::Vocabulary { .. }
            | Error::Config(_)
            | Error::Provenance(_)
            | Error::Json(_) => 2,
            Error::Numerical(_) => 3,
            Error::Metric(_) | Error::Io { .. } | Error::Csv(_) => 1,
        }
    }
}
