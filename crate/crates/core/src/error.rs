use thiserror::Error;

use crate::train::Checkpoint;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("unsupported container: {0}")]
    UnsupportedContainer(String),

    #[error("no calibration parameters for day {day}")]
    CalibrationMissing { day: usize },

    #[error("invalid target: {0}")]
    InvalidTarget(String),

    #[error("infeasible alignment: {frames} frames cannot emit {required} CTC steps")]
    InfeasibleAlignment { frames: usize, required: usize },

    #[error("non-finite training state: {message}")]
    NonFinite {
        message: String,
        /// Most recent checkpoint whose parameters were all finite.
        last_good: Option<Box<Checkpoint>>,
    },

    #[error(transparent)]
    Tensor(#[from] neuroseq_autodiff::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 2 for configuration, 3 for data, 4 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::CalibrationMissing { .. } => 2,
            Error::Data(_)
            | Error::Parse { .. }
            | Error::UnsupportedContainer(_)
            | Error::InvalidTarget(_)
            | Error::Io(_)
            | Error::Json(_) => 3,
            Error::InfeasibleAlignment { .. } | Error::NonFinite { .. } | Error::Tensor(_) => 4,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
