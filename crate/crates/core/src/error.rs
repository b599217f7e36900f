use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong in the library.
///
/// The variants are grouped into the four classes the command line reports
/// through its exit code: validation, numerical, I/O and parse problems.
#[derive(Debug, Error)]
pub enum OstError {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("unsupported dimension {dim}: {reason}")]
    UnsupportedDimension { dim: usize, reason: &'static str },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("training diverged at iteration {iteration}: {reason}")]
    Training { iteration: usize, reason: String },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("bad tensor file {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },
}

/// Coarse error class, used to pick a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Numerical,
    Io,
}

impl OstError {
    pub fn validation(msg: impl Into<String>) -> Self {
        OstError::Validation(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        OstError::Numerical(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        OstError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            OstError::Validation(_)
            | OstError::UnsupportedDimension { .. }
            | OstError::Precondition(_)
            | OstError::Parse { .. } => ErrorClass::Validation,
            OstError::Numerical(_) | OstError::Training { .. } => ErrorClass::Numerical,
            OstError::Io { .. } | OstError::Format { .. } => ErrorClass::Io,
        }
    }

    /// Process exit code: 1 validation, 2 numerical, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self.class() {
            ErrorClass::Validation => 1,
            ErrorClass::Numerical => 2,
            ErrorClass::Io => 3,
        }
    }
}

pub type Result<T, E = OstError> = std::result::Result<T, E>;
