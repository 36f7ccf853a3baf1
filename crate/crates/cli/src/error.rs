use std::path::Path;

use csr_core::capture::CaptureError;
use csr_core::eval::EvalError;
use csr_core::merge::MergeError;
use csr_core::neural_dict::{OfflineError, TrainError};
use csr_core::runtime::RuntimeError;
use thiserror::Error;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot read capture: {0}")]
    Capture(String),
    #[error("plan/capture mismatch: {0}")]
    Mismatch(String),
    #[error("{0}")]
    Overflow(String),
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Capture(_) => 3,
            CliError::Mismatch(_) => 4,
            CliError::Overflow(_) => 5,
            CliError::Schema(_) => 6,
        }
    }

    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Failed(format!("{}: {e}", path.display()))
    }
}

impl From<CaptureError> for CliError {
    fn from(e: CaptureError) -> Self {
        match e {
            CaptureError::InvalidSpec(_) => CliError::Config(e.to_string()),
            _ => CliError::Capture(e.to_string()),
        }
    }
}

impl From<MergeError> for CliError {
    fn from(e: MergeError) -> Self {
        match e {
            MergeError::Capture(c) => c.into(),
            MergeError::InvalidPlan(_) => CliError::Mismatch(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::PlanMismatch(_) => CliError::Mismatch(e.to_string()),
            TrainError::InvalidConfig(_) => CliError::Config(e.to_string()),
            TrainError::Capture(c) => c.into(),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<OfflineError> for CliError {
    fn from(e: OfflineError) -> Self {
        match e {
            OfflineError::BadMagic(_)
            | OfflineError::UnsupportedVersion(_)
            | OfflineError::Metadata(_)
            | OfflineError::Truncated
            | OfflineError::Invalid(_) => CliError::Schema(e.to_string()),
            OfflineError::UnknownLayer { .. } | OfflineError::MissingEntry { .. } => CliError::Mismatch(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<RuntimeError> for CliError {
    fn from(e: RuntimeError) -> Self {
        match e {
            RuntimeError::IndexOverflow { .. } => CliError::Overflow(e.to_string()),
            RuntimeError::Offline(o) => o.into(),
            RuntimeError::Mismatch(_) | RuntimeError::MissingLane { .. } => CliError::Mismatch(e.to_string()),
            RuntimeError::BadMagic(_)
            | RuntimeError::UnsupportedVersion(_)
            | RuntimeError::Metadata(_)
            | RuntimeError::Truncated
            | RuntimeError::DictionaryHash { .. } => CliError::Schema(e.to_string()),
            RuntimeError::Codec(csr_core::codec::CodecError::InvalidConfig(_)) => CliError::Config(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Runtime(r) => r.into(),
            EvalError::Train(t) => t.into(),
            EvalError::InvalidSweep(_) => CliError::Config(e.to_string()),
            EvalError::Codec(csr_core::codec::CodecError::InvalidConfig(_)) => CliError::Config(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}
