use std::path::{Path, PathBuf};

use m2cl_core::agents::AgentError;
use m2cl_core::engine::DiscussionError;
use m2cl_core::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("backend error: {0}")]
    Backend(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 0 success, 1 validation, 2 backend or I/O, 3 verification failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io { .. } | CliError::Backend(_) => 2,
            CliError::Verification(_) => 3,
            CliError::Core(e) => match e {
                CoreError::Io { .. } => 2,
                CoreError::Backend(AgentError::Config(_)) => 1,
                CoreError::Backend(_) => 2,
                _ => 1,
            },
        }
    }
}

impl From<AgentError> for CliError {
    fn from(e: AgentError) -> Self {
        match e {
            AgentError::Config(msg) => CliError::Validation(msg),
            other => CliError::Backend(other.to_string()),
        }
    }
}

impl From<DiscussionError> for CliError {
    fn from(e: DiscussionError) -> Self {
        match e {
            DiscussionError::Setup(inner) => CliError::Core(inner),
            DiscussionError::Agent { agent, round, source, .. } => CliError::Backend(format!("agent {agent} failed in round {round}: {source}")),
        }
    }
}
