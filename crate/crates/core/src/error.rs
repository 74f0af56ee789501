use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Two operands whose shapes cannot be combined.
    #[error("{op}: shape {left:?} is incompatible with {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A single operand with an invalid shape for the operation.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// Argument outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// Layer used out of order, e.g. backward without a preceding forward.
    #[error("state error: {0}")]
    State(String),
    /// Model, task or protocol configuration that cannot be built.
    #[error("configuration error: {0}")]
    Config(String),
    /// Non-finite value where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Broken internal invariant (e.g. subject leakage between folds).
    #[error("invariant violated: {0}")]
    Invariant(String),
}

pub type Result<T> = core::result::Result<T, Error>;
