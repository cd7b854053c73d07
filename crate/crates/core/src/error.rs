//! Error type shared across the pipeline.
//!
//! Every fallible operation returns [`Result`]. Errors carry enough context
//! to be actionable from a terminal (file, line number, offending value) and
//! classify themselves into a small set of [`ErrorCategory`] values that the
//! command-line frontend maps onto process exit codes.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Bad configuration: contradictory options, infeasible model shapes.
    Config,
    /// Bad input data: parse failures, validation failures, misalignment.
    Data,
    /// Numerical failure at run time: divergence, singular systems.
    Compute,
    /// Filesystem trouble reading or writing an artifact.
    Io,
}

/// Everything that can go wrong in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A text record could not be parsed. `line` is 1-based and counts the
    /// header, matching what an editor shows.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Input parsed but violates an invariant (non-positive rate,
    /// out-of-order dates, mismatched calendars, ...).
    #[error("invalid data: {0}")]
    Validation(String),

    /// Tensor or panel dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// The requested configuration is unusable.
    #[error("bad configuration: {0}")]
    Config(String),

    /// A numerical procedure failed (training diverged, singular matrix).
    #[error("compute error: {0}")]
    Compute(String),

    /// Underlying I/O failure, annotated with the path involved.
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Which coarse category this error belongs to.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) => ErrorCategory::Config,
            Error::Parse { .. } | Error::Validation(_) | Error::Shape(_) => ErrorCategory::Data,
            Error::Compute(_) => ErrorCategory::Compute,
            Error::Io { .. } => ErrorCategory::Io,
        }
    }

    /// Convenience constructor for I/O errors with path context.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categories_are_stable() {
        let e = Error::Parse {
            path: "spot.csv".into(),
            line: 3,
            msg: "bad rate".into(),
        };
        assert_eq!(e.category(), ErrorCategory::Data);
        assert_eq!(Error::Config("x".into()).category(), ErrorCategory::Config);
        assert_eq!(Error::Compute("x".into()).category(), ErrorCategory::Compute);
        assert_eq!(
            Error::io("f", std::io::Error::new(std::io::ErrorKind::Other, "x")).category(),
            ErrorCategory::Io
        );
    }

    #[test]
    fn parse_error_reads_like_a_compiler_diagnostic() {
        let e = Error::Parse {
            path: "spot.csv".into(),
            line: 17,
            msg: "rate must be positive, got -1.2".into(),
        };
        assert_eq!(e.to_string(), "spot.csv:17: rate must be positive, got -1.2");
    }
}
