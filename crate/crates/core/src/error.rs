//! Error type shared by all modules of the crate.

use alloc::string::String;
use core::fmt;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;

/// Errors raised by construction, validation and recovery routines.
///
/// Variants are grouped by the kind of failure so that callers (in
/// particular the CLI) can map them onto an exit-code contract without
/// string matching.
#[derive(Clone, Debug, PartialEq)]
pub enum Error {
    /// Malformed input: dimension mismatches, unsorted/duplicate supports,
    /// out-of-range indices, empty neighborhoods, non-normalizable states...
    Invalid(String),
    /// A model-level invariant failed numerically: non-unitary collision,
    /// collision not fixing the quiescent state, circuit layers not tiling
    /// the lattice, rule not a *-homomorphism, ...
    ModelInvariant(String),
    /// A sparse-state operation would exceed the configured term cap.
    TermCap { cap: usize, needed: usize },
    /// Structure recovery failed at a named stage (patch intersection,
    /// isotypic split, collision extraction, intertwiner solve); carries a
    /// diagnostic. This is a verdict about the input rule, not a bug.
    Recovery { stage: &'static str, detail: String },
    /// Arithmetic overflow on lattice coordinates.
    CoordinateOverflow,
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Invalid(msg) => write!(f, "invalid input: {msg}"),
            Error::ModelInvariant(msg) => write!(f, "model invariant violated: {msg}"),
            Error::TermCap { cap, needed } => write!(
                f,
                "sparse term cap exceeded: need {needed} terms, cap is {cap}"
            ),
            Error::Recovery { stage, detail } => {
                write!(f, "structure recovery failed at {stage}: {detail}")
            }
            Error::CoordinateOverflow => write!(f, "lattice coordinate overflow"),
        }
    }
}

#[cfg(test)]
impl std::error::Error for Error {}

/// Shorthand constructors used throughout the crate.
impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
    pub fn model(msg: impl Into<String>) -> Self {
        Error::ModelInvariant(msg.into())
    }
    pub fn recovery(stage: &'static str, detail: impl Into<String>) -> Self {
        Error::Recovery {
            stage,
            detail: detail.into(),
        }
    }
}
