use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("data length {actual} does not match shape element count {expected}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("coordinates {coords:?} out of bounds for shape {dims:?}")]
    OutOfBounds { coords: Vec<usize>, dims: Vec<usize> },

    #[error("expected rank {expected}, got rank {actual}")]
    RankError { expected: usize, actual: usize },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Shape inference failed while building or validating a model.
    #[error("shape error: {0}")]
    ShapeError(String),

    #[error("gradient/parameter alignment error: {0}")]
    AlignmentError(String),

    #[error("empty input")]
    EmptyInput,

    #[error("length error: expected {expected}, got {actual}")]
    LengthError { expected: usize, actual: usize },

    #[error("value out of range: {0}")]
    RangeError(String),

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("insufficient inputs: class {class} has {available}, need {required}")]
    InsufficientInputs {
        class: usize,
        available: usize,
        required: usize,
    },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("too few rows: {0}")]
    TooFewRows(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("a timing collection is already in progress")]
    CollectionBusy,

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
