use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("non-finite input to {0}")]
    NumericInput(&'static str),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("variable does not belong to this tape")]
    NotOnTape,

    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("empty utterance")]
    EmptyUtterance,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("empty reference")]
    EmptyReference,

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    /// Short machine-readable category, used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidTensor(_) => "invalid-tensor",
            Error::NumericInput(_) => "numeric-input",
            Error::NonScalarLoss(_) => "non-scalar-loss",
            Error::NotOnTape => "not-on-tape",
            Error::DuplicateParameter(_) => "duplicate-parameter",
            Error::Contract(_) => "contract",
            Error::EmptyUtterance => "empty-utterance",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::EmptyReference => "empty-reference",
            Error::CorruptCheckpoint(_) => "corrupt-checkpoint",
            Error::CheckpointVersion { .. } => "checkpoint-version",
            Error::ParameterShape { .. } => "parameter-shape",
            Error::MissingParameter(_) => "missing-parameter",
            Error::Diverged { .. } => "diverged",
            Error::Io(_) => "io",
        }
    }
}

pub(crate) fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}
