use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A parameter is outside its documented range.
    InvalidParameter { name: &'static str, reason: String },
    /// Two grids that must be congruent are not.
    ShapeMismatch { expected: String, found: String },
    /// Two inputs disagree on their channel tag.
    ChannelMismatch { expected: String, found: String },
    /// Input data violates a structural invariant.
    InvalidData(String),
    /// An input stream or collection was empty.
    Empty(&'static str),
    /// Training produced a non-finite loss.
    Diverged { step: usize, last_finite_loss: f64 },
}

impl Error {
    pub fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub fn shape(expected: impl fmt::Debug, found: impl fmt::Debug) -> Self {
        Error::ShapeMismatch {
            expected: alloc::format!("{expected:?}"),
            found: alloc::format!("{found:?}"),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidParameter { name, reason } => write!(f, "invalid {name}: {reason}"),
            Error::ShapeMismatch { expected, found } => {
                write!(f, "shape mismatch: expected {expected}, found {found}")
            }
            Error::ChannelMismatch { expected, found } => {
                write!(f, "channel mismatch: expected {expected}, found {found}")
            }
            Error::InvalidData(msg) => write!(f, "invalid data: {msg}"),
            Error::Empty(what) => write!(f, "empty input: {what}"),
            Error::Diverged {
                step,
                last_finite_loss,
            } => write!(
                f,
                "training diverged at step {step} (last finite loss {last_finite_loss})"
            ),
        }
    }
}

impl core::error::Error for Error {}
