use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Errors shared across the crate.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Mismatched dimensions or otherwise invalid arguments.
    InvalidInput(String),
    /// Invalid architecture or generator configuration.
    InvalidConfig(String),
    /// A beta fell outside (0, 1) or alpha-bar is not strictly decreasing.
    InvalidSchedule(String),
    /// The requested terminal alpha-bar cannot be reached with this beta0.
    UnreachableTarget {
        target: f64,
        beta0: f64,
        /// Largest alpha-bar attainable at gamma = 0; lowering beta0 raises it.
        max_attainable: f64,
    },
    /// The 6D rotation input was zero or had parallel direction vectors.
    DegenerateRotation,
    /// Training produced a non-finite loss.
    TrainingDiverged { step: usize, learning_rate: f64 },
    /// The denoising loop produced a non-finite state.
    InferenceDiverged { step: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::InvalidSchedule(msg) => write!(f, "invalid schedule: {msg}"),
            Error::UnreachableTarget {
                target,
                beta0,
                max_attainable,
            } => write!(
                f,
                "unreachable target alpha-bar {target}: with beta0 = {beta0} the \
                 largest attainable value is {max_attainable}; use a smaller beta0"
            ),
            Error::DegenerateRotation => {
                write!(f, "degenerate 6D rotation: zero or parallel direction vectors")
            }
            Error::TrainingDiverged {
                step,
                learning_rate,
            } => write!(
                f,
                "training diverged at step {step} (learning rate {learning_rate})"
            ),
            Error::InferenceDiverged { step } => {
                write!(f, "inference diverged at denoising step {step}")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}
