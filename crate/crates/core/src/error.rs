use thiserror::Error;

/// Errors raised when a caller breaks an operation's contract or hands in
/// malformed data.
#[derive(Debug, Error)]
pub enum Error {
    #[error("state index {index} out of range (num_states = {len})")]
    StateOutOfRange { index: usize, len: usize },

    #[error("action index {index} out of range (num_actions = {len})")]
    ActionOutOfRange { index: usize, len: usize },

    #[error("kernel row (state {state}, action {action}) is invalid: {reason}")]
    InvalidKernelRow {
        state: usize,
        action: usize,
        reason: String,
    },

    #[error("initial state {0} is labelled unsafe")]
    UnsafeInitialState(usize),

    #[error("invalid concentration for row (state {state}, action {action}): {reason}")]
    InvalidConcentration {
        state: usize,
        action: usize,
        reason: String,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("layout line {line}: {message}")]
    Layout { line: usize, message: String },

    #[error("malformed document: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn precondition(message: impl Into<String>) -> Error {
    Error::Precondition(message.into())
}
