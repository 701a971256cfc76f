use std::path::{Path, PathBuf};

use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] biaslab::Error),

    #[error("configuration: {0}")]
    Config(String),

    #[error("{}: {message}", path.display())]
    ConfigParse { path: PathBuf, message: String },

    #[error("missing input: {0}")]
    Missing(String),

    #[error("gradient check failed: max relative error {0:e}")]
    GradCheckFailed(f64),
}

impl CliError {
    pub fn from_io(path: &Path, e: std::io::Error) -> Self {
        CliError::Core(biaslab::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn kind(&self) -> &'static str {
        use biaslab::Error as E;
        match self {
            CliError::Core(E::Io { source, .. })
                if source.kind() == std::io::ErrorKind::NotFound =>
            {
                "missing_file"
            }
            CliError::Core(E::Io { .. }) => "io",
            CliError::Core(E::HashMismatch { .. }) => "hash_mismatch",
            CliError::Core(E::MissingKey(_)) => "missing_cache_entry",
            CliError::Core(E::Parse { .. } | E::Format(_)) | CliError::ConfigParse { .. } => {
                "parse"
            }
            CliError::Core(E::NonFinite { .. }) => "non_finite",
            CliError::Core(_) | CliError::Config(_) => "invalid_config",
            CliError::Missing(_) => "missing_file",
            CliError::GradCheckFailed(_) => "grad_check_failed",
        }
    }

    /// Process exit status; 2 is left to argument-parsing errors.
    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "invalid_config" => 3,
            "missing_file" => 4,
            "hash_mismatch" => 5,
            "parse" => 6,
            "missing_cache_entry" => 7,
            "non_finite" => 8,
            "grad_check_failed" => 9,
            _ => 1,
        }
    }

    /// Single-line machine-readable description.
    pub fn to_json_line(&self) -> String {
        json!({
            "error": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        })
        .to_string()
    }
}
