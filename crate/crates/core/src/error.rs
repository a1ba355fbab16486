use alloc::string::String;

use crate::model::Family;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch in {matrix}: expected {expected_rows}x{expected_cols}, found {found_rows}x{found_cols}")]
    DimensionMismatch {
        matrix: &'static str,
        expected_rows: usize,
        expected_cols: usize,
        found_rows: usize,
        found_cols: usize,
    },

    #[error("response y = {y} is outside the support of {family}: {reason}")]
    Domain {
        family: Family,
        y: f64,
        reason: &'static str,
    },

    #[error("invalid parameter {name} = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error("missing or non-finite entry in {matrix} at row {row}, column {col}; missing data is not supported")]
    MissingData {
        matrix: &'static str,
        row: usize,
        col: usize,
    },

    #[error("packed vector has length {found}, layout requires {expected}")]
    PackedLength { expected: usize, found: usize },

    #[error("packed vector entry {index} is not finite")]
    NonFinitePacked { index: usize },

    #[error("non-finite family evaluation at unit {unit}, response {response} (eta = {eta})")]
    NonFiniteTerm {
        unit: usize,
        response: usize,
        eta: f64,
    },

    #[error("no closed-form VA for {family}; supported families: gaussian-identity, poisson-log")]
    NoClosedFormVa { family: Family },

    #[error("inner Newton iteration for unit {unit} did not converge (gradient norm {grad_norm:e})")]
    InnerNewton { unit: usize, grad_norm: f64 },

    #[error("Tweedie series did not converge after {terms} terms (y = {y}, phi = {phi}, nu = {nu})")]
    SeriesNonConvergence {
        y: f64,
        phi: f64,
        nu: f64,
        terms: usize,
    },

    #[error("adaptive Gauss-Hermite oracle supports p <= 2, got p = {p}")]
    QuadratureDimension { p: usize },

    #[error("{0} has zero norm")]
    ZeroNorm(&'static str),

    #[error("trace of the null-model residual covariance is zero")]
    ZeroTrace,

    #[error("every start produced a non-finite objective at initialization")]
    AllStartsNonFinite,

    #[error("{0}")]
    Config(String),
}

pub type Result<T> = core::result::Result<T, Error>;
