use crate::tensor::Shape;

/// Errors produced by tensor construction, operations, and the tape.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Two operands whose shapes must agree did not.
    #[error("{op}: shape mismatch, left {left} vs right {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    /// A single operand had a shape the operation cannot accept.
    #[error("{op}: expected {expected}, got {got}")]
    BadShape {
        op: &'static str,
        expected: String,
        got: Shape,
    },

    /// The operation produced a NaN or infinity.
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    /// Operands were recorded on different tapes.
    #[error("{op}: operands live on different tapes")]
    TapeMismatch { op: &'static str },

    /// Gradient was requested of a non-scalar value.
    #[error("grad: loss must be a scalar, got {got}")]
    NonScalarLoss { got: Shape },

    /// An index was out of range for the dimension it addresses.
    #[error("{op}: index {index} out of range for dimension of size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },

    /// A parameter set and gradient set disagreed on names or shapes.
    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),

    /// A heatmap target was not one-hot.
    #[error("{op}: target channel {channel} is not one-hot")]
    NotOneHot { op: &'static str, channel: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
