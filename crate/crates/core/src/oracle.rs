//! Marginal log-likelihood by adaptive Gauss-Hermite quadrature (p <= 2) or
//! importance sampling around the Laplace mode.

use alloc::vec::Vec;

use libm::{log, sqrt};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::eval_trusted;
use crate::linalg::cholesky_lower;
use crate::model::{CovStructure, ModelSpec, Parameters, ResponseData};
use crate::objective::{Method, Problem};
use crate::special::{log_sum_exp, pairwise_sum, LN_2PI};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleMethod {
    Aghq,
    Mc,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSettings {
    /// Quadrature nodes per dimension.
    pub nodes: usize,
    /// Monte Carlo draws per unit (rounded up to an even number).
    pub draws: usize,
    pub seed: u64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        OracleSettings {
            nodes: 21,
            draws: 100_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleValue {
    pub value: f64,
    pub per_unit: Vec<f64>,
    /// Monte Carlo standard error of `value` (zero for quadrature).
    pub se: f64,
    pub per_unit_se: Vec<f64>,
}

/// Gauss-Hermite nodes and weights for the weight `exp(-t^2)`, by the
/// Golub-Welsch eigenvalue method. Nodes are ascending.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = sqrt(k as f64 / 2.0);
        jacobi[(k, k - 1)] = b;
        jacobi[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let sqrt_pi = sqrt(core::f64::consts::PI);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let v0 = eig.eigenvectors[(0, k)];
            (eig.eigenvalues[k], sqrt_pi * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// `sum_j log f(y_ij | u) - u'u/2 - (p/2) log(2 pi)`.
fn log_joint(
    spec: &ModelSpec,
    data: &ResponseData,
    params: &Parameters,
    off: &DMatrix<f64>,
    i: usize,
    u: &DVector<f64>,
) -> Result<f64> {
    let mut terms = Vec::with_capacity(spec.m + 1);
    for j in 0..spec.m {
        let eta = off[(i, j)] + params.gamma.row(j).transpose().dot(u);
        let e = eval_trusted(spec.family, data.y[(i, j)], eta, params.phi_j(j), spec.nu())?;
        terms.push(e.logf);
    }
    terms.push(-0.5 * u.dot(u) - 0.5 * spec.p as f64 * LN_2PI);
    Ok(pairwise_sum(&terms))
}

/// Per-unit log marginal likelihood.
pub fn oracle_marginal(
    spec: &ModelSpec,
    data: &ResponseData,
    params: &Parameters,
    method: OracleMethod,
    settings: &OracleSettings,
) -> Result<OracleValue> {
    let p = spec.p;
    if method == OracleMethod::Aghq && p > 2 {
        return Err(Error::QuadratureDimension { p });
    }
    let problem = Problem::new(spec, data, Method::Laplace, CovStructure::Full)?;
    let theta = problem.layout.pack(spec, params, None)?.into_inner();
    let modes = problem.laplace_modes(&theta, None)?;
    let zero = DMatrix::zeros(spec.n, p);
    let off = crate::model::linear_predictor(spec, params, &data.x, &zero)?;

    let mut per_unit = Vec::with_capacity(spec.n);
    let mut per_unit_se = Vec::with_capacity(spec.n);
    let (nodes, weights) = gauss_hermite(settings.nodes.max(1));
    for (i, um) in modes.iter().enumerate() {
        let c = cholesky_lower(&um.covariance).ok_or(Error::NonFiniteTerm {
            unit: i,
            response: 0,
            eta: f64::NAN,
        })?;
        let log_det_c: f64 = (0..p).map(|k| log(c[(k, k)])).sum();
        match method {
            OracleMethod::Aghq => {
                let mut terms = Vec::new();
                let n_nodes = nodes.len();
                let total = n_nodes.pow(p as u32);
                for idx in 0..total {
                    let mut t = DVector::zeros(p);
                    let mut lw = 0.0;
                    let mut rest = idx;
                    for k in 0..p {
                        let node = rest % n_nodes;
                        rest /= n_nodes;
                        t[k] = nodes[node];
                        lw += log(weights[node]);
                    }
                    let u = &um.mode + &c * &t * core::f64::consts::SQRT_2;
                    terms.push(lw + t.dot(&t) + log_joint(spec, data, params, &off, i, &u)?);
                }
                per_unit.push(0.5 * p as f64 * core::f64::consts::LN_2 + log_det_c + log_sum_exp(&terms));
                per_unit_se.push(0.0);
            }
            OracleMethod::Mc => {
                let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
                rng.set_stream(i as u64);
                let pairs = settings.draws.div_ceil(2).max(1);
                let log_q0 = -0.5 * p as f64 * LN_2PI - log_det_c;
                let mut logw = Vec::with_capacity(2 * pairs);
                for _ in 0..pairs {
                    let z = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
                    let lq = log_q0 - 0.5 * z.dot(&z);
                    let shift = &c * &z;
                    logw.push(log_joint(spec, data, params, &off, i, &(&um.mode + &shift))? - lq);
                    logw.push(log_joint(spec, data, params, &off, i, &(&um.mode - &shift))? - lq);
                }
                let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let pair_means: Vec<f64> = logw
                    .chunks(2)
                    .map(|w| 0.5 * (libm::exp(w[0] - top) + libm::exp(w[1] - top)))
                    .collect();
                let mean = pairwise_sum(&pair_means) / pairs as f64;
                let var = if pairs > 1 {
                    let sq: Vec<f64> = pair_means.iter().map(|v| (v - mean) * (v - mean)).collect();
                    pairwise_sum(&sq) / (pairs - 1) as f64
                } else {
                    0.0
                };
                per_unit.push(top + log(mean));
                per_unit_se.push(sqrt(var / pairs as f64) / mean);
            }
        }
    }
    let se = sqrt(per_unit_se.iter().map(|s| s * s).sum::<f64>());
    Ok(OracleValue {
        value: pairwise_sum(&per_unit),
        per_unit,
        se,
        per_unit_se,
    })
}
