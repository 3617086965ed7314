//! Error type shared by every module in the crate.

use thiserror::Error;

pub type Result<T, E = LampError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LampError {
    /// Invalid argument or configuration value.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Least-squares design without full column rank and no ridge penalty.
    #[error("singular fit: collinear design columns {columns:?}")]
    SingularFit { columns: Vec<usize> },

    #[error("insufficient data: need at least {required} samples, have {available}{}", hint.as_deref().map(|h| format!(" ({h})")).unwrap_or_default())]
    InsufficientData { required: usize, available: usize, hint: Option<String> },

    /// A statistical test could not be computed (degenerate expanding window).
    #[error("test unavailable: {0}")]
    TestUnavailable(String),

    /// The model kept returning output that could not be parsed.
    #[error("could not parse model response after {attempts} attempt(s): {reason}")]
    Parse { attempts: u32, reason: String, last_raw: String },

    /// The model returned a well-formed response with an invalid value.
    #[error("invalid model response: {0}")]
    Validation(String),

    #[error("endpoint failure: {0}")]
    Endpoint(String),

    /// Every request of a batch failed.
    #[error("all {0} batch requests failed")]
    BatchFailure(usize),

    #[error("factor alignment failed; unmatched factors: {unmatched:?}")]
    Alignment { unmatched: Vec<String> },

    #[error("factor elicitation failed: {0}")]
    Elicitation(String),

    #[error("factor aggregation failed: {0}")]
    Aggregation(String),

    #[error("rewrite failed: {0}")]
    Rewrite(String),

    #[error("corrupt session: field `{field}`: {reason}")]
    CorruptSession { field: String, reason: String },

    #[error("unsupported session schema: {0}")]
    Migration(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LampError {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        LampError::Parameter(msg.into())
    }

    /// True for failures caused by the model endpoint rather than local input.
    pub fn is_endpoint_failure(&self) -> bool {
        matches!(
            self,
            LampError::Parse { .. }
                | LampError::Validation(_)
                | LampError::Endpoint(_)
                | LampError::BatchFailure(_)
                | LampError::Alignment { .. }
                | LampError::Elicitation(_)
                | LampError::Aggregation(_)
                | LampError::Rewrite(_)
        )
    }
}
