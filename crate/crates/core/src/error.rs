use std::path::PathBuf;

use macode_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("CSV header {found:?} does not match schema columns {expected:?}")]
    HeaderMismatch {
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("parse error at line {line}, column '{column}': {message}")]
    Parse {
        line: u64,
        column: String,
        message: String,
    },
    #[error("unknown category '{value}' at line {line}, column '{column}'")]
    UnknownCategory {
        line: u64,
        column: String,
        value: String,
    },
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("column '{column}' is degenerate: {reason}")]
    DegenerateColumn { column: String, reason: String },
    #[error("index {index} out of range 1..={max}")]
    IndexOutOfRange { index: usize, max: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("table must be fully observed for {0}")]
    NotFullyObserved(&'static str),
    #[error("bias line search failed for column '{column}'")]
    LineSearchFailed { column: String },
    #[error("missing rate {rate} infeasible: tails supply at most {max}")]
    InfeasibleRate { rate: f64, max: f64 },
    #[error("training produced non-finite values at epoch {epoch}, batch {batch}: {source}")]
    TrainingDiverged {
        epoch: usize,
        batch: usize,
        #[source]
        source: TensorError,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("conditioning event has zero probability")]
    ZeroMassCondition,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("adaptive quadrature did not converge on [{a}, {b}]")]
    QuadratureFailure { a: f64, b: f64 },
    #[error("metric needs at least one continuous column")]
    NoContinuousColumns,
    #[error("training table for the utility learner is empty")]
    EmptyTrain,
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("{path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, cause: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
