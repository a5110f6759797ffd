//! Error type shared by all core modules.

use std::fmt;

/// Failure conditions surfaced by tensor, network, normalizer, compensation,
/// and oracle operations.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Operand shapes are incompatible (broadcast, reduction, convolution
    /// geometry, parameter/activation mismatches).
    Shape(String),
    /// An operation was called on state that cannot support it (missing
    /// gradients on a record, normalizer misuse, inconsistent graph state).
    State(String),
    /// An argument value is out of range or otherwise unusable.
    Argument(String),
    /// Stored data failed an integrity check (content hash mismatch).
    Integrity(String),
    /// A network graph violates a structural precondition.
    Graph(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Shape(msg) => write!(f, "shape error: {msg}"),
            CoreError::State(msg) => write!(f, "state error: {msg}"),
            CoreError::Argument(msg) => write!(f, "argument error: {msg}"),
            CoreError::Integrity(msg) => write!(f, "integrity error: {msg}"),
            CoreError::Graph(msg) => write!(f, "graph error: {msg}"),
        }
    }
}

impl std::error::Error for CoreError {}

pub type CoreResult<T> = Result<T, CoreError>;
