use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {op} got {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("degenerate row {row}: every entry is masked out")]
    DegenerateRow { row: usize },

    #[error("disconnected graph: input #{index} does not reach the loss")]
    Disconnected { index: usize },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("normalization failure: denominator {value} below epsilon at row {row}")]
    Normalization { row: usize, value: f32 },

    #[error("sequence length {len} exceeds the supported width {max}")]
    Length { len: usize, max: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unsupported mechanism: {0}")]
    Unsupported(String),

    #[error("parse error at {position}: {message}")]
    Parse { position: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("numeric failure at step {step}: {message}")]
    Numeric { step: usize, message: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used for single-line JSON errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidTensor(_) => "invalid_tensor",
            Error::DegenerateRow { .. } => "degenerate_row",
            Error::Disconnected { .. } => "disconnected_graph",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::Param(_) => "parameter",
            Error::Normalization { .. } => "normalization",
            Error::Length { .. } => "length",
            Error::Config(_) => "config",
            Error::Unsupported(_) => "unsupported_mechanism",
            Error::Parse { .. } => "parse",
            Error::Format(_) => "format",
            Error::Generation(_) => "generation",
            Error::Contract(_) => "contract",
            Error::Numeric { .. } => "numeric",
            Error::Empty(_) => "empty",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
