//! Command implementations behind the `lrsl` binary: weight decomposition,
//! the pretrain/finetune experiment pipeline, model-pair analyses, and
//! adapter merging. Exit codes are a stable contract: 0 success, 1 runtime
//! failure, 2 invalid arguments or config, 3 data-integrity error.

pub mod commands;
pub mod config;
pub mod manifest;

use thiserror::Error;

use lrsl_core::adapters::AdapterError;
use lrsl_core::analysis::AnalysisError;
use lrsl_core::linalg::LinalgError;
use lrsl_core::nn::NnError;
use lrsl_core::trainer::{CheckpointError, TrainerError};

pub use config::{AnalysisFlags, ExperimentConfig, StageConfig, SEED_ENV_VAR};
pub use manifest::RunManifest;

/// Failure classes mapped one-to-one onto exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    DataIntegrity(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Usage(_) => 2,
            CliError::DataIntegrity(_) => 3,
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(io) => CliError::Runtime(io.to_string()),
            other => CliError::DataIntegrity(other.to_string()),
        }
    }
}

impl From<AdapterError> for CliError {
    fn from(e: AdapterError) -> Self {
        match e {
            AdapterError::Linalg(inner) => CliError::from(inner),
            AdapterError::Nn(inner) => CliError::from(inner),
            // Rank/alpha/dropout/placement problems are configuration.
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<TrainerError> for CliError {
    fn from(e: TrainerError) -> Self {
        match e {
            TrainerError::InvalidConfig(_)
            | TrainerError::InvalidTask(_)
            | TrainerError::TaskCapacityExceeded { .. }
            | TrainerError::StepOutOfRange { .. }
            | TrainerError::EmptyDataset
            | TrainerError::SequenceTooLong { .. } => CliError::Usage(e.to_string()),
            TrainerError::Checkpoint(inner) => CliError::from(inner),
            TrainerError::Adapter(inner) => CliError::from(inner),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::RankTooLarge { .. } => CliError::Usage(e.to_string()),
            AnalysisError::EmptyCorpus => CliError::Usage(e.to_string()),
            AnalysisError::StructureMismatch(_)
            | AnalysisError::VocabMismatch { .. }
            | AnalysisError::ShapeMismatch { .. } => CliError::DataIntegrity(e.to_string()),
            AnalysisError::Io(io) => CliError::Runtime(io.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<LinalgError> for CliError {
    fn from(e: LinalgError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_match_the_contract() {
        assert_eq!(CliError::Runtime(String::new()).exit_code(), 1);
        assert_eq!(CliError::Usage(String::new()).exit_code(), 2);
        assert_eq!(CliError::DataIntegrity(String::new()).exit_code(), 3);
    }

    #[test]
    fn corrupt_checkpoints_classify_as_data_integrity() {
        let e = CliError::from(CheckpointError::BadMagic { found: *b"XXXX" });
        assert_eq!(e.exit_code(), 3);
        let e = CliError::from(CheckpointError::UnknownTensor("w".into()));
        assert_eq!(e.exit_code(), 3);
    }

    #[test]
    fn rank_problems_classify_as_usage() {
        let e = CliError::from(AdapterError::ZeroRank);
        assert_eq!(e.exit_code(), 2);
        let e = CliError::from(AnalysisError::RankTooLarge {
            rank: 9,
            max: 4,
            context: "w".into(),
        });
        assert_eq!(e.exit_code(), 2);
    }
}
