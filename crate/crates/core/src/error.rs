use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("validation error: {0}")]
    Validation(String),

    /// KL divergence with `q_s == 0` where `p_s > 0`.
    #[error("divergence undefined: q has zero mass at support point {0} where p is positive")]
    DivergenceUndefined(usize),

    /// No distribution puts mass on this support point, so the optimal classifier is undefined.
    #[error("optimal classifier undefined at support point {0}: all distributions are zero")]
    UndefinedPoint(usize),

    #[error("optimization failure: {0}")]
    OptimizationFailure(String),

    /// A theory check ran to completion but missed its tolerance.
    #[error("verification failed: {0}")]
    Verification(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code: 2 validation, 3 I/O, 4 divergence, 5 theory verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            Error::Diverged(_) => 4,
            Error::Verification(_) | Error::OptimizationFailure(_) => 5,
            Error::Dimension { .. }
            | Error::Validation(_)
            | Error::DivergenceUndefined(_)
            | Error::UndefinedPoint(_)
            | Error::Parse { .. } => 2,
        }
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
