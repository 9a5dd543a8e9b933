use thiserror::Error;

/// Errors raised by the analysis, estimation and testing routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum MslcaError {
    #[error("invalid block structure: {0}")]
    InvalidStructure(String),

    #[error("block index ({k}, {l}) out of range for {blocks} blocks")]
    BlockIndex { k: usize, l: usize, blocks: usize },

    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPositiveSemidefinite { min_eigenvalue: f64 },

    #[error("{}", near_singular_message(*.block, *.lambda_min, *.lambda_max))]
    NearSingular {
        block: Option<usize>,
        lambda_min: f64,
        lambda_max: f64,
    },

    #[error("symmetric eigensolver failed to converge")]
    NoConvergence,

    #[error("non-finite value at row {row}, column {column}")]
    NonFinite { row: usize, column: usize },

    #[error("insufficient sample: n = {n}, need at least {required}")]
    InsufficientSample { n: usize, required: usize },

    #[error("operation requires exactly two blocks, found {0}")]
    RequiresTwoBlocks(usize),

    #[error("eigenvalues of T are not simple (group of size {size} at rank {rank})")]
    RepeatedEigenvalues { rank: usize, size: usize },

    #[error("negative quadratic-form weight {0:e}")]
    NegativeWeight(f64),

    #[error("student-t degrees of freedom must exceed 4, got {0}")]
    NuTooSmall(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

fn near_singular_message(block: Option<usize>, lambda_min: f64, lambda_max: f64) -> String {
    match block {
        Some(k) => format!(
            "covariance block {} is near singular (lambda_min = {lambda_min:e}, lambda_max = {lambda_max:e})",
            k + 1
        ),
        None => format!(
            "matrix is near singular (lambda_min = {lambda_min:e}, lambda_max = {lambda_max:e})"
        ),
    }
}

impl MslcaError {
    /// Attaches a block index to a `NearSingular` error.
    pub(crate) fn in_block(self, k: usize) -> Self {
        match self {
            MslcaError::NearSingular {
                lambda_min,
                lambda_max,
                ..
            } => MslcaError::NearSingular {
                block: Some(k),
                lambda_min,
                lambda_max,
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, MslcaError>;
