//! Error types shared across the toolkit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MisureError {
    #[error("input shape mismatch: expected {expected}, got {got}")]
    InputShape { expected: String, got: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("adapter `{adapter}` lacks the `{capability}` capability")]
    Capability { adapter: String, capability: String },

    #[error("class {class} is absent from the prediction")]
    ClassAbsent { class: usize },

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("non-finite value encountered in {0}")]
    Numerical(String),

    #[error("dilation cap of {cap} reached before the stopping threshold (dice {dice:.4})")]
    MaxDilationsExceeded { cap: usize, dice: f64 },

    #[error("labels are degenerate: {0}")]
    DegenerateLabels(String),

    #[error("feature {index} is constant; cannot standardize")]
    DegenerateFeature { index: usize },

    #[error("record incomplete: {0}")]
    Record(String),

    #[error("data source unavailable: {0}")]
    DataSource(String),

    #[error("placement failed after {attempts} rejection-sampling attempts")]
    Placement { attempts: usize },

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl MisureError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        MisureError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, MisureError>;
