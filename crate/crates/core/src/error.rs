use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("duplicate loop id `{0}`")]
    DuplicateId(String),
    #[error("invalid loop id `{0}`: ids must be identifiers")]
    BadId(String),
    #[error("invalid target: {0}")]
    InvalidTarget(String),
    #[error("template has no anchor for loop `{0}`")]
    MissingAnchor(String),
    #[error("child index {index} out of range (node has {count} children)")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("node has no unexpanded child")]
    FullyExpanded,
    #[error("domain error: {0}")]
    Domain(String),
    #[error("history contains no successful evaluation")]
    EmptyHistory,
    #[error("root configuration failed to evaluate: {0}")]
    RootFailed(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
