use thiserror::Error;

use crate::edge_features::FeatureError;
use crate::tensor::TensorError;
use crate::topology::TopologyError;

/// Crate-level error. `is_validation` separates bad input (exit 1) from runtime failures (exit 2).
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("ingestion error: {0}")]
    Ingest(String),
    #[error("windowing error: {0}")]
    Window(String),
    #[error("{stage}: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn stage(stage: &'static str, message: impl Into<String>) -> Self {
        Error::Stage { stage, message: message.into() }
    }

    pub fn tensor(stage: &'static str, e: TensorError) -> Self {
        Error::Stage { stage, message: e.to_string() }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Ingest(_) | Error::Window(_) | Error::Topology(_) | Error::Feature(_) | Error::Json(_)
        )
    }
}
