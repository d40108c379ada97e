use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("stage `{needed}` has not been run in this output directory (needed by `{stage}`)")]
    MissingStage { stage: String, needed: String },

    #[error("output directory holds artifacts of config {found}, current config is {expected}; use a fresh --out-dir")]
    ConfigMismatch { expected: String, found: String },

    #[error("artifact {path} of stage `{stage}` is missing")]
    MissingArtifact { stage: String, path: PathBuf },

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path}: {detail}")]
    Parse { path: PathBuf, detail: String },

    #[error(transparent)]
    Core(#[from] branchgen_core::Error),
}

impl PipelineError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    pub fn parse(path: &Path, detail: impl ToString) -> Self {
        Self::Parse { path: path.to_path_buf(), detail: detail.to_string() }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;
