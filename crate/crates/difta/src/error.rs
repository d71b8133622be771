use std::path::PathBuf;

/// Coarse failure categories surfaced as the machine-parsable prefix of
/// every CLI error line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Io,
    Data,
    Train,
    Adapt,
    Eval,
    Internal,
}

impl ErrorCategory {
    pub fn name(&self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Io => "io",
            ErrorCategory::Data => "data",
            ErrorCategory::Train => "train",
            ErrorCategory::Adapt => "adapt",
            ErrorCategory::Eval => "eval",
            ErrorCategory::Internal => "internal",
        }
    }
}

/// Error type for everything above the core algorithms.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("config: {path}: {message}")]
    ConfigFile { path: PathBuf, message: String },
    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("data: {0}")]
    Data(String),
    #[error("decode: {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("train: {0}")]
    Train(String),
    #[error("adapt: {0}")]
    Adapt(String),
    #[error("eval: {0}")]
    Eval(String),
    #[error("internal: {0}")]
    Internal(String),
}

impl CliError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            CliError::Config(_) | CliError::ConfigFile { .. } => ErrorCategory::Config,
            CliError::Io { .. } | CliError::Decode { .. } => ErrorCategory::Io,
            CliError::Data(_) => ErrorCategory::Data,
            CliError::Train(_) => ErrorCategory::Train,
            CliError::Adapt(_) => ErrorCategory::Adapt,
            CliError::Eval(_) => ErrorCategory::Eval,
            CliError::Internal(_) => ErrorCategory::Internal,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<difta_core::CoreError> for CliError {
    fn from(e: difta_core::CoreError) -> Self {
        CliError::Internal(e.to_string())
    }
}
