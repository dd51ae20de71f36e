use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("singular system in {context} (condition estimate {condition:.3e})")]
    Singular { context: String, condition: f64 },

    #[error("Gram matrix is not positive semi-definite (smallest eigenvalue {min_eigenvalue:.3e})")]
    NotPositiveSemidefinite { min_eigenvalue: f64 },

    #[error("objective became non-finite at iteration {iteration}")]
    Divergence { iteration: usize, trace: Vec<f64> },

    #[error("all {} starts failed: {}", .0.len(), .0.join("; "))]
    AllStartsFailed(Vec<String>),

    #[error("undefined input: {0}")]
    UndefinedInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    /// Prefixes the context of a singularity error, leaving other variants alone.
    pub(crate) fn in_context(self, outer: impl std::fmt::Display) -> Self {
        match self {
            Error::Singular { context, condition } => Error::Singular {
                context: format!("{outer}: {context}"),
                condition,
            },
            other => other,
        }
    }
}
