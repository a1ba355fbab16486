//! Generalized linear latent variable models fitted by the extended
//! variational approximation (EVA), with Laplace and standard variational
//! baselines, a marginal-likelihood oracle and post-fit inference.
//!
//! The crate is `no_std` and only needs an allocator.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod error;
pub mod family;
pub mod fit;
pub mod inference;
pub mod init;
pub mod lbfgs;
pub mod linalg;
pub mod model;
pub mod objective;
pub mod oracle;
pub mod procrustes;
pub mod profile;
pub mod simulate;
pub mod special;

pub use error::{Error, Result};
pub use fit::{fit, fit_with_clock, Clock, FitConfig, FitResult, Strategy};
pub use lbfgs::StopReason;
pub use inference::{
    cmsep, dunn_smyth_residuals, observed_information, ordination, variance_explained, wald, Cmsep, InferenceReport,
    ObservedInformation, OrdinationOutput,
};
pub use procrustes::procrustes_error;
pub use oracle::{oracle_marginal, OracleMethod, OracleSettings, OracleValue};
pub use family::{Cdf, DispersionEval, FamilyEval};
pub use objective::{
    curvature_term, eva_gradient, eva_objective, laplace_gradient, laplace_objective, va_objective, Method, ModeCache,
    ObjectiveValue, Problem,
};
pub use model::{
    linear_predictor, pack, residual_covariance, unpack, CovStructure, Family, Layout, ModelSpec, PackedVector,
    Parameters, ResponseData, VariationalParams,
};
