//! Run orchestration: config files, training runs with CSV/checkpoint
//! artifacts, greedy evaluation with trajectory logging, and smoothed
//! training curves.

mod config;
mod curves;
mod eval;
mod run;

pub use config::{parse_config_file, parse_config_str, RunConfig};
pub use curves::{ema, export_curves, CurveRow};
pub use eval::{
    cmd_eval, detect_oscillation, evaluate, write_trajectory, EvalEpisode, EvalReport,
    TrajectoryRow,
};
pub use run::{cmd_train, read_manifest, ManifestEntry, TrainArtifacts};

use crate::env::EnvError;
use crate::model::{CheckpointError, ModelError};
use crate::trainer::TrainError;

#[derive(Debug)]
pub enum HarnessError {
    /// Config-file problem, tagged with the offending key when known.
    Config { key: Option<String>, message: String },
    Io(std::io::Error),
    Env(EnvError),
    Model(ModelError),
    Checkpoint(CheckpointError),
    Train(TrainError),
    /// Eval-time disagreement between checkpoint and environment shapes.
    ShapeMismatch(String),
    /// Curve export over runs of different lengths.
    MismatchedEpisodeCounts(String),
    MalformedData(String),
}

impl std::fmt::Display for HarnessError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HarnessError::Config { key: Some(k), message } => {
                write!(f, "config field `{k}`: {message}")
            }
            HarnessError::Config { key: None, message } => write!(f, "config: {message}"),
            HarnessError::Io(e) => write!(f, "i/o error: {e}"),
            HarnessError::Env(e) => write!(f, "{e}"),
            HarnessError::Model(e) => write!(f, "{e}"),
            HarnessError::Checkpoint(e) => write!(f, "{e}"),
            HarnessError::Train(e) => write!(f, "{e}"),
            HarnessError::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            HarnessError::MismatchedEpisodeCounts(msg) => {
                write!(f, "mismatched episode counts: {msg}")
            }
            HarnessError::MalformedData(msg) => write!(f, "malformed data: {msg}"),
        }
    }
}

impl std::error::Error for HarnessError {}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e)
    }
}

impl From<EnvError> for HarnessError {
    fn from(e: EnvError) -> Self {
        HarnessError::Env(e)
    }
}

impl From<ModelError> for HarnessError {
    fn from(e: ModelError) -> Self {
        HarnessError::Model(e)
    }
}

impl From<CheckpointError> for HarnessError {
    fn from(e: CheckpointError) -> Self {
        HarnessError::Checkpoint(e)
    }
}

impl From<TrainError> for HarnessError {
    fn from(e: TrainError) -> Self {
        HarnessError::Train(e)
    }
}

/// Seed-stream domain for per-run platform sampling.
pub const DOMAIN_PLATFORM: u64 = 10;
