use thiserror::Error;

/// Errors raised by the numerical pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot:.3e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("linear system is numerically singular (pivot {pivot:.3e} at index {index})")]
    SingularSystem { index: usize, pivot: f64 },

    #[error("solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("support is degenerate at entry ({row}, {col}): |Z| = {z_abs:.6e}, threshold = {threshold:.6e}")]
    DegenerateSupport {
        row: usize,
        col: usize,
        z_abs: f64,
        threshold: f64,
    },

    #[error("split leaves an empty side (n = {n}, train = {n_train})")]
    DegenerateSplit { n: usize, n_train: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("restricted system of size {size} exceeds the cap of {cap}")]
    ResourceLimit { size: usize, cap: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("outer iteration {iteration}: {source}")]
    AtOuterIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// Strips `AtOuterIteration` wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtOuterIteration { source, .. } => source.root(),
            other => other,
        }
    }

    /// Outer iteration at which the error surfaced, if any.
    pub fn iteration(&self) -> Option<usize> {
        match self {
            Error::AtOuterIteration { iteration, .. } => Some(*iteration),
            _ => None,
        }
    }

    /// Stable snake_case name of the root variant.
    pub fn kind(&self) -> &'static str {
        match self.root() {
            Error::NotPositiveDefinite { .. } => "not_positive_definite",
            Error::SingularSystem { .. } => "singular_system",
            Error::NotConverged { .. } => "not_converged",
            Error::DegenerateSupport { .. } => "degenerate_support",
            Error::DegenerateSplit { .. } => "degenerate_split",
            Error::DegenerateInput(_) => "degenerate_input",
            Error::ResourceLimit { .. } => "resource_limit",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::AtOuterIteration { .. } => unreachable!("root strips wrappers"),
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Parse(_) => "parse",
        }
    }

    pub(crate) fn at_iteration(self, iteration: usize) -> Error {
        Error::AtOuterIteration {
            iteration,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
