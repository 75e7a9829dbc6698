use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("template parse error at byte {offset}: {message}")]
    TemplateParse { offset: usize, message: String },

    #[error("invalid workflow {workflow_id}: {}", violations.join("; "))]
    InvalidWorkflow {
        workflow_id: String,
        violations: Vec<String>,
    },

    #[error("duplicate sample ({workflow_id}, {task_id})")]
    DuplicateSample { workflow_id: String, task_id: String },

    #[error("sample references missing {kind} {id}")]
    MissingReference { kind: &'static str, id: String },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("provider {provider} failed for {subject}: {message}")]
    Provider {
        provider: String,
        subject: String,
        message: String,
    },

    #[error("numeric guard: {0}")]
    NumericGuard(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("key mismatch: {0}")]
    KeyMismatch(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier used for machine-parseable CLI errors.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse(_) => "parse",
            Error::TemplateParse { .. } => "template-parse",
            Error::InvalidWorkflow { .. } => "invalid-workflow",
            Error::DuplicateSample { .. } => "duplicate-sample",
            Error::MissingReference { .. } => "missing-reference",
            Error::NotFound(_) => "not-found",
            Error::Precondition(_) => "precondition",
            Error::Config(_) => "config",
            Error::Provider { .. } => "provider",
            Error::NumericGuard(_) => "numeric-guard",
            Error::NonFinite(_) => "non-finite",
            Error::Checkpoint(_) => "checkpoint",
            Error::KeyMismatch(_) => "key-mismatch",
        }
    }
}
