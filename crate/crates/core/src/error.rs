use std::io;

/// Errors raised across the crate.
///
/// Precondition failures on shapes, masks and configuration are reported as
/// values rather than panics so that callers driving many jobs can log and
/// continue.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown class id {0}")]
    UnknownClass(usize),

    #[error("task {0} is already present in the zoo")]
    DuplicateTask(u64),

    #[error("zoo corruption{}: {reason}", task_id.map(|t| format!(" in record for task {t}")).unwrap_or_default())]
    Corrupt { task_id: Option<u64>, reason: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape { op, detail: detail.into() }
}
