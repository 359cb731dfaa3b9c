use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: {channels} channels are not divisible into {groups} groups")]
    Groups {
        op: &'static str,
        channels: usize,
        groups: usize,
    },

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },

    #[error("corrupt coding table for channel {channel}: {reason}")]
    CorruptTable { channel: usize, reason: String },

    #[error("truncated payload: decoder needed byte {0} past the end of the stream")]
    Truncated(usize),

    #[error("{0}")]
    Format(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("training diverged at epoch {epoch}, step {step} (lambda = {lambda}): {what}")]
    Diverged {
        epoch: usize,
        step: u64,
        lambda: f64,
        what: String,
    },

    #[error("operation requires {0} mode")]
    Mode(&'static str),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
