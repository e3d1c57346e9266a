//! Error type shared by all core operations.

use alloc::string::String;
use core::fmt;

/// Errors raised by core numerics. Carrying a message keeps the enum small;
/// callers that need to branch do so on the variant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CoreError {
    /// A precondition on an argument was violated.
    InvalidArg(String),
    /// Tensor dimensions do not line up.
    ShapeMismatch(String),
    /// A computation produced or received a non-finite value.
    NonFinite(String),
    /// A problem instance is degenerate (zero row, vacuous bound, ...).
    Degenerate(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::InvalidArg(m) => write!(f, "invalid argument: {m}"),
            CoreError::ShapeMismatch(m) => write!(f, "shape mismatch: {m}"),
            CoreError::NonFinite(m) => write!(f, "non-finite value: {m}"),
            CoreError::Degenerate(m) => write!(f, "degenerate instance: {m}"),
        }
    }
}

impl core::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;
