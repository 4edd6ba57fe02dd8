use thiserror::Error;

/// Errors raised by tensor construction, graph primitives and the optimizer.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },

    #[error("{op}: input length {len} is shorter than kernel size {kernel}")]
    InputTooShort {
        op: &'static str,
        len: usize,
        kernel: usize,
    },

    #[error("cross entropy: every target position is ignored (empty loss)")]
    EmptyLoss,

    #[error("{op}: target {target} out of range for {classes} classes")]
    TargetOutOfRange {
        op: &'static str,
        target: usize,
        classes: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{0}")]
    InvalidArgument(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
