use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: &'static str, reason: String },

    #[error("{field} = {value} outside [0, {cap}]")]
    Range {
        field: &'static str,
        value: f64,
        cap: f64,
    },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("attention row {row} has no allowed key")]
    FullyMaskedRow { row: usize },

    #[error("decoder prompt of {len} tokens exceeds limit {max}")]
    PromptTooLong { len: usize, max: usize },

    #[error("mask span ({start}, {len}) outside [0, {limit})")]
    SpanOutOfRange {
        start: usize,
        len: usize,
        limit: usize,
    },

    #[error("invalid swap ({i}, {j}) for {limit} history frames")]
    InvalidSwap { i: usize, j: usize, limit: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value at {context} {index}")]
    NonFinite { context: &'static str, index: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint config mismatch on `{field}`: file has {found}, expected {expected}")]
    ConfigMismatch {
        field: &'static str,
        found: u64,
        expected: u64,
    },

    #[error("infeasible corpus configuration: {0}")]
    Infeasible(String),
}

impl Error {
    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Config {
            field,
            reason: reason.into(),
        }
    }
}
