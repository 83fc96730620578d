use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parallel files are not aligned: {src_lines} source lines vs {tgt_lines} target lines")]
    Alignment { src_lines: usize, tgt_lines: usize },

    #[error("{path}: invalid UTF-8 on line {line}")]
    Decode { path: PathBuf, line: usize },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("unknown language code {0:?}")]
    UnknownLang(String),

    #[error("split needs at least {required} pairs but the corpus has {available}")]
    SplitTooLarge { required: usize, available: usize },

    #[error("id {id} is out of range for a vocabulary of size {size}")]
    IdOutOfRange { id: usize, size: usize },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape { context: &'static str, expected: String, got: String },

    #[error("attention row {row} has every key position masked")]
    DegenerateMask { row: usize },

    #[error("every target position is padding; loss is undefined")]
    AllPadded,

    #[error("non-finite value in {what} at step {step}")]
    NonFinite { what: String, step: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("ablation grid is missing cell {0}")]
    MissingCell(String),

    #[error("word-level score for split {0:?} is zero; relative boost is undefined")]
    ZeroWordScore(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
