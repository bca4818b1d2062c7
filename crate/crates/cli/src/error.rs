//! CLI error type with process exit-code mapping: 2 for precondition
//! failures (bad inputs, failed margins), 1 for internal errors.

use bwnet_core::CoreError;

#[derive(Debug)]
pub enum CliError {
    /// User-facing precondition failure (exit code 2).
    Input(String),
    /// Internal failure (exit code 1).
    Internal(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(msg) => write!(f, "{msg}"),
            CliError::Internal(msg) => write!(f, "internal error: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Internal(_) => 1,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            // Violated preconditions of the requested computation.
            CoreError::Input(_)
            | CoreError::NotPsd { .. }
            | CoreError::Rank(_)
            | CoreError::TauTooLarge { .. }
            | CoreError::NonDistinctSpectrum { .. }
            | CoreError::CombinatorialLimit { .. }
            | CoreError::DimensionLimit { .. }
            | CoreError::MdmFailed { .. } => CliError::Input(e.to_string()),
            // Numerical breakdown mid-computation.
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Internal(format!("io: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Input(format!("json: {e}"))
    }
}
