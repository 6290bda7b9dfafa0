use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("degenerate signal: {0}")]
    Degenerate(String),
    #[error("aliasing error: {0}")]
    Aliasing(String),
    #[error("oversize record {id}: {tokens} tokens exceed capacity {capacity}")]
    Oversize { id: u64, tokens: usize, capacity: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("insufficient history: window {window} exceeds {available} recorded steps")]
    InsufficientHistory { window: usize, available: usize },
    #[error("corpus i/o error: {0}")]
    Corpus(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("pipeline error: {0}")]
    Pipeline(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Process exit status for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Corpus(_) | Error::Checkpoint(_) => 3,
            Error::Numeric(_) | Error::Degenerate(_) => 4,
            Error::Pipeline(_) => 1,
            _ => 2,
        }
    }
}
