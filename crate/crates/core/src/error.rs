use alloc::string::String;
use core::fmt;

/// Error type shared by all core modules.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Two buffers that must agree in shape do not.
    ShapeMismatch { expected: String, got: String },
    /// A scalar argument is outside its documented domain.
    InvalidArgument(String),
    /// A timestep lies outside `1..=T` for the schedule in use.
    TimestepOutOfRange { t: usize, max: usize },
    /// A computation produced a NaN or infinity where finite values are required.
    NonFinite(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch { expected, got } => {
                write!(f, "shape mismatch: expected {expected}, got {got}")
            }
            CoreError::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            CoreError::TimestepOutOfRange { t, max } => {
                write!(f, "timestep {t} out of range 1..={max}")
            }
            CoreError::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
        }
    }
}

impl core::error::Error for CoreError {}
