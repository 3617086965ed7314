use std::fmt;

use lamp_core::{AuditFailure, LampError};

pub const SUCCESS: u8 = 0;
pub const FAILURE: u8 = 1;
pub const VALIDATION: u8 = 2;
pub const ENDPOINT: u8 = 3;
pub const CORRUPT: u8 = 4;

/// Error reported by a subcommand, with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self { code: VALIDATION, message: message.into() }
    }
}

pub fn code_for(error: &LampError) -> u8 {
    match error {
        LampError::Parameter(_) | LampError::InsufficientData { .. } => VALIDATION,
        LampError::CorruptSession { .. } | LampError::Migration(_) => CORRUPT,
        e if e.is_endpoint_failure() => ENDPOINT,
        _ => FAILURE,
    }
}

impl From<LampError> for CliError {
    fn from(error: LampError) -> Self {
        Self { code: code_for(&error), message: error.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(error: std::io::Error) -> Self {
        Self { code: FAILURE, message: error.to_string() }
    }
}

impl From<AuditFailure> for CliError {
    fn from(failure: AuditFailure) -> Self {
        Self { code: code_for(&failure.error), message: failure.to_string() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}
