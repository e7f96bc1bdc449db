//! Crate-wide error types.

use thiserror::Error;

/// Errors produced by the container layer. Each failure mode is a distinct
/// variant so callers can tell truncation from corruption from version skew.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: stream does not start with \"MTTF\"")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u8),
    #[error("stream truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("header crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("payload length mismatch: header says {declared}, got {actual}")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("invalid header field: {0}")]
    InvalidField(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("decode error: {0}")]
    Decode(String),
    #[error("key-frame codec adapter error: {0}")]
    Adapter(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("training error: {0}")]
    Train(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}
