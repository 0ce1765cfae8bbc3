use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}:{column}: {message}")]
    Parse {
        file: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("{file}:{line}: unknown patient '{patient_id}'")]
    UnknownPatient {
        file: String,
        line: usize,
        patient_id: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("cohort too small: {0}")]
    CohortTooSmall(String),

    #[error("insufficient visits for patient '{0}'")]
    InsufficientVisits(String),

    #[error("vocabulary already extended with prescription nodes")]
    AlreadyExtended,

    #[error("unknown op '{0}'")]
    UnknownOp(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("non-finite activation in layer '{layer}'")]
    NonFinite { layer: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("undefined {0}: both classes are required")]
    UndefinedMetric(&'static str),

    #[error("degenerate calibration: predictions are constant")]
    DegenerateCalibration,

    #[error("unknown ablation '{name}', expected one of: {valid}")]
    UnknownAblation { name: String, valid: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
