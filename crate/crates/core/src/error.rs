use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// One schema violation found while validating a configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    /// Dotted key path, e.g. `loss_weights.gan`.
    pub key: String,
    pub message: String,
}

impl ConfigIssue {
    pub fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            message: message.into(),
        }
    }
}

impl std::fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {}", join_issues(.0))]
    Config(Vec<ConfigIssue>),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{}: {message}", .path.display())]
    Data { path: PathBuf, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("{0}")]
    MissingStage(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
}

fn join_issues(issues: &[ConfigIssue]) -> String {
    issues
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

/// Coarse failure class, mapped one-to-one onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Divergence,
    MissingStage,
    Internal,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Divergence => 4,
            ErrorCategory::MissingStage => 5,
            ErrorCategory::Internal => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Data => "data",
            ErrorCategory::Divergence => "divergence",
            ErrorCategory::MissingStage => "missing-stage",
            ErrorCategory::Internal => "internal",
        }
    }
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config(vec![ConfigIssue {
            key: key.into(),
            message: message.into(),
        }])
    }

    pub fn data(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => ErrorCategory::Config,
            Error::Shape(_)
            | Error::Data { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => ErrorCategory::Data,
            Error::Divergence(_) => ErrorCategory::Divergence,
            Error::MissingStage(_) => ErrorCategory::MissingStage,
            Error::Tensor(_) => ErrorCategory::Internal,
        }
    }
}
