use thiserror::Error;

/// Errors raised by tensor arithmetic and the differentiation tape.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} needs {expected} values, got {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("usage error: {0}")]
    Usage(String),
}

/// Errors raised while loading and preparing battery tables.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column \"{column}\" (mapped from header \"{header}\")")]
    MissingColumn { column: String, header: String },
    #[error("row {row}: cannot parse {column} value {value:?} as a finite number")]
    BadValue {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: time_s is not strictly increasing within cycle")]
    NonMonotoneTime { row: usize },
    #[error("table needs at least 2 rows, got {0}")]
    TooShort(usize),
    #[error("column {column} is constant; zscore is undefined, use minmax")]
    ConstantColumn { column: String },
    #[error("column {0} is not present in the table")]
    AbsentColumn(String),
    #[error("column lengths disagree: {0}")]
    Ragged(String),
    #[error("too few windows to populate train/validation/test: {0}")]
    TooFewWindows(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// Errors from model construction, training, evaluation and synthesis.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("non-finite loss at step {step}")]
    NanLoss { step: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("report grids differ: {0}")]
    GridMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
