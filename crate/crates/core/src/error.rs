use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Backend,
    Validation,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: field `{field}`: {message}")]
    Corpus {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },

    #[error("duplicate question id `{id}` at lines {first} and {second}")]
    DuplicateId { id: String, first: usize, second: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("stage `{stage}` cannot run: {missing} pending")]
    StageOrder { stage: String, missing: String },

    #[error("stage `{0}` is already complete (pass overwrite to replace it)")]
    StageComplete(String),

    #[error("run rejected: corpus hash {found} does not match manifest {expected}")]
    CorpusMismatch { expected: String, found: String },

    #[error("run directory {0} is locked by another command")]
    Locked(PathBuf),

    #[error("backend failure for question `{question_id}` sample {sample_index}: {message}")]
    Generation {
        question_id: String,
        sample_index: usize,
        message: String,
    },

    #[error("backend failure: {0}")]
    Backend(String),

    #[error("logprobs unavailable for question `{0}` (request discrete-only mode explicitly)")]
    LogprobsUnavailable(String),

    #[error("unparseable backend reply after reprompt: {0:?}")]
    UnparseableReply(String),

    #[error("{0}")]
    Invalid(String),

    #[error("AUROC undefined: {0}")]
    AurocUndefined(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed stage file {path}: {message}")]
    StageFile { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Generation { .. }
            | Error::Backend(_)
            | Error::LogprobsUnavailable(_)
            | Error::UnparseableReply(_) => ErrorKind::Backend,
            Error::Io { .. } | Error::Locked(_) => ErrorKind::Io,
            _ => ErrorKind::Validation,
        }
    }
}
