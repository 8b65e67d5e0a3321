use std::path::PathBuf;

use hdnet_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("{what} must be positive and finite, got {value}")]
    NonPositive { what: &'static str, value: f64 },

    #[error("invalid {what}: {detail}")]
    Invalid { what: &'static str, detail: String },

    #[error("bin coordinate {b} outside [0, {max}]")]
    BinOutOfRange { b: f64, max: usize },

    #[error("invalid bin distribution: {0}")]
    InvalidDistribution(String),

    #[error("skeleton: {0}")]
    Skeleton(String),

    #[error("bounding box does not intersect the heatmap grid (invalid detection)")]
    EmptyMask,

    #[error("crop patch does not intersect the image")]
    EmptyCrop,

    #[error("no valid placement for {persons} persons after {attempts} attempts")]
    Placement { persons: usize, attempts: usize },

    #[error("no matched pairs to evaluate")]
    NoMatches,

    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step} (batch seed {batch_seed}); batch dumped to {dump}")]
    NonFiniteLoss {
        step: u64,
        batch_seed: u64,
        dump: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

impl CoreError {
    pub(crate) fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        Self::Invalid {
            what,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

pub(crate) fn positive(what: &'static str, value: f64) -> Result<f64> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(CoreError::NonPositive { what, value })
    }
}
