use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("probe direction is zero")]
    ZeroProbe,
    #[error("sequence is constant; correlation undefined")]
    ConstantSequence,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("token id {id} out of range for vocab of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("sequence of {len} tokens exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("prompt set is empty")]
    EmptyPromptSet,
    #[error("text encodes to no tokens")]
    EmptyText,
    #[error("labeled set contains a single class")]
    SingleClass,
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("token {0:?} not in vocab")]
    UnresolvableToken(String),
    #[error("lexicon side {0} is empty")]
    EmptyLexiconSide(&'static str),
    #[error("model configs differ")]
    ConfigMismatch,
    #[error("neuron index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("invalid manifest: {0}")]
    ManifestInvalid(String),
    #[error("payload truncated: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Numeric,
    Io,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::NonFiniteLoss(_) | Error::NonFinite(_) => ErrorClass::Numeric,
            Error::Io { .. } => ErrorClass::Io,
            _ => ErrorClass::Validation,
        }
    }

    /// Stable short identifier for machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::ZeroVector => "ZeroVector",
            Error::ZeroProbe => "ZeroProbe",
            Error::ConstantSequence => "ConstantSequence",
            Error::LengthMismatch(..) => "LengthMismatch",
            Error::NonFinite(_) => "NonFinite",
            Error::TokenOutOfRange { .. } => "TokenOutOfRange",
            Error::SequenceTooLong { .. } => "SequenceTooLong",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::EmptyPromptSet => "EmptyPromptSet",
            Error::EmptyText => "EmptyText",
            Error::SingleClass => "SingleClass",
            Error::NonFiniteLoss(_) => "NonFiniteLoss",
            Error::UnresolvableToken(_) => "UnresolvableToken",
            Error::EmptyLexiconSide(_) => "EmptyLexiconSide",
            Error::ConfigMismatch => "ConfigMismatch",
            Error::IndexOutOfRange(_) => "IndexOutOfRange",
            Error::ManifestInvalid(_) => "ManifestInvalid",
            Error::TruncatedPayload { .. } => "TruncatedPayload",
            Error::Parse { .. } => "ParseError",
            Error::Io { .. } => "IoError",
            Error::Json(_) => "JsonError",
        }
    }
}
