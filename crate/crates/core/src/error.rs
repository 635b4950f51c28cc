use alloc::string::String;

/// Errors raised by the numeric kernels and the network modules.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("every token in the sequence is padding")]
    EmptyRegion,
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("logic error: {0}")]
    Logic(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid box: {0}")]
    InvalidBox(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn dim_err(op: &'static str, detail: String) -> Error {
    Error::Dimension { op, detail }
}
