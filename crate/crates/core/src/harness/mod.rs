//! Training, evaluation and reporting on synthetic multimodal corpora,
//! plus the command-line front end.

pub mod ablation;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod reports;
pub mod schedule;
pub mod trainer;

use std::path::PathBuf;

use thiserror::Error;

use crate::audio::AudioError;
use crate::elastic::ElasticError;
use crate::model::ModelError;
use crate::rlopt::RlError;
use crate::sequence::Modality;
use crate::vision::VisionError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("checkpoint not found: {}", .0.display())]
    CheckpointMissing(PathBuf),
    #[error("checkpoint unreadable: {0}")]
    CheckpointCorrupt(String),
    #[error("non-finite value: {0}")]
    NumericFailure(String),
    #[error("loss EMA for {} has not been observed yet", .0.tag())]
    EmaNotWarm(Modality),
    #[error("io error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Elastic(#[from] ElasticError),
    #[error(transparent)]
    Vision(#[from] VisionError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Rl(#[from] RlError),
}

impl HarnessError {
    /// Process exit code: 2 for configuration errors, 3 for numeric
    /// failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::ConfigInvalid(_) | HarnessError::Elastic(ElasticError::InvalidSchedule(_)) => 2,
            HarnessError::Model(ModelError::Config(_)) => 2,
            HarnessError::NumericFailure(_) => 3,
            _ => 1,
        }
    }
}

pub(crate) fn write_file(path: &std::path::Path, contents: &str) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io { path: dir.to_path_buf(), source })?;
    }
    std::fs::write(path, contents).map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })
}

pub(crate) fn read_file(path: &std::path::Path) -> Result<String, HarnessError> {
    std::fs::read_to_string(path).map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })
}
