//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Dimension mismatch between related quantities.
    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// Structurally invalid input (empty dataset, missing user, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// A numerical routine produced a non-finite value.
    #[error("numerical failure at iteration {iter}: {what}")]
    Numerical { what: String, iter: usize },

    /// A loaded object failed its contract checks.
    #[error("validation failed: {0}")]
    Validation(String),

    /// The population generator could not reach the diversity floor.
    #[error(
        "diversity target {target} unsatisfied after {attempts} attempts \
         (best sigma_k^2 = {best})"
    )]
    DiversityUnsatisfiable {
        target: f64,
        attempts: usize,
        best: f64,
    },

    /// Malformed file contents, with a location.
    #[error("{path}: {location}: {msg}")]
    Parse {
        path: String,
        location: String,
        msg: String,
    },

    /// Unknown strategy name passed to a registry lookup.
    #[error("unknown strategy {name:?}; available: {available}")]
    UnknownStrategy { name: String, available: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
