use std::path::PathBuf;

use thiserror::Error;

/// Coarse classification of failures, used by the command-line front end to
/// pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Invalid arguments or inputs outside the supported envelope.
    Usage,
    /// Unreadable, unwritable or malformed files.
    Input,
    /// A model existence condition or admissibility requirement failed.
    ModelCondition,
    /// A decomposition or post-hoc numerical check failed.
    Numerical,
}

/// Location of a problem inside a delimited text file (1-based).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellPosition {
    pub line: usize,
    pub column: usize,
}

impl std::fmt::Display for CellPosition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}, column {}", self.line, self.column)
    }
}

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("{0}: ragged row, expected {1} fields but found {2}")]
    Ragged(usize, usize, usize),
    #[error("{at}: missing value {value:?}")]
    Missing { at: CellPosition, value: String },
    #[error("{at}: non-numeric value {value:?}")]
    NonNumeric { at: CellPosition, value: String },
    #[error("duplicate {axis} label {label:?}")]
    DuplicateLabel { axis: &'static str, label: String },
    #[error("line {line}: {message}")]
    Summary { line: usize, message: String },
    #[error("summary key {0:?} is missing")]
    MissingKey(String),
    #[error("summary key {key:?} has invalid value {value:?}")]
    InvalidValue { key: String, value: String },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("expression data must be sample-centered before computing the sample covariance")]
    CenteringRequired,

    #[error("matrix is not positive definite: eigenvalue {eigenvalue:e} below tolerance")]
    NotPositiveDefinite { eigenvalue: f64 },

    #[error(
        "known-covariate existence condition violated: λ_min(C11) = {lambda_min:.6e} must exceed \
         tr(C22)/(n-d) = {residual:.6e}; other, latent variables explain more variation than the \
         known covariates"
    )]
    KnownOnlyExistence { lambda_min: f64, residual: f64 },

    #[error(
        "latent existence condition violated: λ_min(C11) = {lambda_min:.6e} must exceed the \
         residual variance σ² = {sigma2:.6e} (p = {p})"
    )]
    LatentExistence { lambda_min: f64, sigma2: f64, p: usize },

    #[error(
        "degenerate spectrum: with p = {p} the retained eigenvalue {retained:.6e} does not exceed \
         the trailing eigenvalue {trailing:.6e}"
    )]
    DegenerateSpectrum { p: usize, retained: f64, trailing: f64 },

    #[error("latent dimension p = {p} is not admissible for a reduced space of dimension {dim}")]
    LatentDimension { p: usize, dim: usize },

    #[error("degenerate covariate: zero vector")]
    DegenerateCovariate,

    #[error("gene {gene:?}: both variance components are zero, the correction map is singular")]
    DegenerateGene { gene: String },

    #[error("constraint violated: {what} (deviation {deviation:.3e})")]
    ConstraintViolation { what: &'static str, deviation: f64 },

    #[error("rank deficient: requested {requested} but numerical rank is {achievable}")]
    RankDeficient { requested: usize, achievable: usize },

    #[error(
        "no admissible latent dimension reaches residual variance below {target:.6e}; the \
         smallest attainable value is {best:.6e}"
    )]
    TargetUnreachable { target: f64, best: f64 },

    #[error(
        "latent existence condition still violated at p = {p} (cap {cap}): λ_min(C11) = \
         {lambda_min:.6e}, σ² = {sigma2:.6e}; some known covariates explain too little variation \
         and should be reconsidered"
    )]
    IrreducibleCovariates { p: usize, cap: usize, lambda_min: f64, sigma2: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("size bound exceeded: {what} is {value}, limit {limit}")]
    SizeBound { what: &'static str, value: usize, limit: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: ParseError },

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidConfig(_) | Error::SizeBound { .. } => ErrorCategory::Usage,
            Error::Parse { .. } | Error::Io { .. } | Error::Shape(_) | Error::CenteringRequired => {
                ErrorCategory::Input
            }
            Error::KnownOnlyExistence { .. }
            | Error::LatentExistence { .. }
            | Error::DegenerateSpectrum { .. }
            | Error::LatentDimension { .. }
            | Error::DegenerateCovariate
            | Error::DegenerateGene { .. }
            | Error::ConstraintViolation { .. }
            | Error::RankDeficient { .. }
            | Error::TargetUnreachable { .. }
            | Error::IrreducibleCovariates { .. } => ErrorCategory::ModelCondition,
            Error::NotPositiveDefinite { .. } | Error::Numerical(_) => ErrorCategory::Numerical,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
