use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("cannot read config {path}: {source}")]
    ConfigRead { path: PathBuf, source: std::io::Error },

    #[error("bad config {path}: {source}")]
    ConfigParse { path: PathBuf, source: toml::de::Error },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("input file not found: {0}")]
    MissingInput(PathBuf),

    #[error("gradient check failed: max relative error {max_rel_error:e} >= {tolerance:e}")]
    GradcheckFailed { max_rel_error: f64, tolerance: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Lib(#[from] pslm::Error),
}

impl CliError {
    /// Process exit status. Usage errors from argument parsing exit with 2.
    pub fn exit_code(&self) -> ExitCode {
        use pslm::Error as L;
        let code = match self {
            CliError::ConfigRead { .. } | CliError::ConfigParse { .. } | CliError::Config(_) => 3,
            CliError::Lib(L::InvalidArgument(_) | L::TextTooLong { .. } | L::ContextOverflow { .. }) => 3,
            CliError::MissingInput(_) => 4,
            CliError::Lib(L::Format { .. } | L::CheckpointMismatch(_) | L::Json(_)) | CliError::Json(_) => 5,
            CliError::Lib(L::TrainingDiverged { .. }) => 6,
            CliError::GradcheckFailed { .. } => 7,
            CliError::Io(_) | CliError::Lib(L::Io(_)) => 8,
        };
        ExitCode::from(code)
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
