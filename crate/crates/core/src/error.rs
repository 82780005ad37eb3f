use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite: pivot {pivot:e} at index {index}")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("conjugate gradient breakdown at iteration {iter}: curvature {curvature:e}")]
    BreakdownDetected { iter: usize, curvature: f64 },

    #[error("variable {index} is degenerate (variance {variance:e})")]
    DegenerateVariable { index: usize, variance: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("line search stalled after {steps} backtracking steps (gradient norm {grad_norm:e})")]
    LineSearchStalled { steps: usize, grad_norm: f64 },

    #[error("sieving stalled at lambda {lambda}: eta {eta:e} above tolerance but no violating position")]
    SieveStalled { lambda: f64, eta: f64 },

    #[error("objective appears unbounded below at lambda {lambda}: iterates follow a direction D with tr D - lambda*|D|_off = {gap:e} and |DA|_F = {null_residual:e}")]
    Unbounded {
        lambda: f64,
        gap: f64,
        null_residual: f64,
    },

    #[error("dense solver refuses p = {p} (cap {cap})")]
    MemoryCapExceeded { p: usize, cap: usize },

    #[error("parse error at row {row}, column {col}: {msg}")]
    Parse { row: usize, col: usize, msg: String },

    #[error("ragged rows: row {row} has {found} fields, expected {expected}")]
    RaggedRows {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("unknown solver `{0}`")]
    UnknownSolver(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
