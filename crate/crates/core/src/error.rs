use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing required key `{0}`")]
    MissingKey(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("RIS configuration violates unit modulus at element {index} (|theta| = {modulus})")]
    NotUnitModulus { index: usize, modulus: f64 },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("missing checkpoint: {}", .0.display())]
    MissingCheckpoint(PathBuf),

    #[error("non-finite metric: {0}")]
    NonFiniteMetric(String),

    #[error("run directory {} is locked by another process", .0.display())]
    Locked(PathBuf),

    #[error("file format error: {0}")]
    Format(String),

    #[error(transparent)]
    Autodiff(#[from] risloc_autodiff::AutodiffError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
