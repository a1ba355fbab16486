//! Starting values: independent per-response GLMs, moment dispersions and
//! loadings from the correlation of GLM working residuals.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use libm::{exp, fabs, pow, sqrt};
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::Result;
use crate::family::eval_trusted;
use crate::model::{Family, ModelSpec, Parameters, ResponseData, VariationalParams};
use crate::special::norm_pdf;

/// Cap on the magnitude of intercepts for degenerate columns.
pub const INTERCEPT_CAP: f64 = 5.0;
const LOADING_SCALE: f64 = 0.5;
const MIN_DIAGONAL: f64 = 0.05;
const VARIATIONAL_SCALE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct Initialization {
    pub params: Parameters,
    pub var: VariationalParams,
    /// Degenerate or non-converging columns.
    pub warnings: Vec<String>,
}

struct Glm {
    coef: DVector<f64>,
    eta: DVector<f64>,
}

/// Starting values for a fit (deterministic).
pub fn initialize(spec: &ModelSpec, data: &ResponseData) -> Result<Initialization> {
    spec.validate()?;
    data.validate_for(spec)?;
    let (n, m, p, q) = (spec.n, spec.m, spec.p, spec.q);
    let family = spec.family;
    let mut params = Parameters::neutral(spec);
    let mut warnings = Vec::new();
    let mut resid = DMatrix::zeros(n, m);

    for j in 0..m {
        let y = data.y.column(j).clone_owned();
        let mean_y = y.mean();
        let constant = y.iter().all(|v| *v == y[0]);
        let glm = if constant {
            warnings.push(format!("response {j}: constant column, intercept capped at +-{INTERCEPT_CAP}"));
            None
        } else {
            let g = fit_glm(family, &y, &data.x, spec.nu());
            if g.is_none() {
                warnings.push(format!("response {j}: GLM start did not converge, using zero slopes"));
            }
            g
        };
        let glm = glm.unwrap_or_else(|| {
            let b0 = fallback_intercept(family, mean_y);
            let mut coef = DVector::zeros(q + 1);
            coef[0] = b0;
            Glm {
                coef,
                eta: DVector::from_element(n, b0),
            }
        });
        params.beta0[j] = glm.coef[0];
        for c in 0..q {
            params.b[(j, c)] = glm.coef[c + 1];
        }
        let mu: DVector<f64> = glm.eta.map(|e| family.mean(e));
        if let Some(phi) = params.phi.as_mut() {
            phi[j] = moment_dispersion(family, &y, &mu, spec.nu(), q + 1);
        }
        for i in 0..n {
            resid[(i, j)] = (y[i] - mu[i]) / dmu_deta(family, glm.eta[i]);
        }
    }

    params.gamma = residual_loadings(&resid, p);
    Ok(Initialization {
        params,
        var: VariationalParams::isotropic(n, p, VARIATIONAL_SCALE),
        warnings,
    })
}

fn fallback_intercept(family: Family, mean_y: f64) -> f64 {
    let raw = match family {
        Family::GaussianIdentity => return mean_y,
        Family::BetaLogit => family.link(mean_y.clamp(1e-6, 1.0 - 1e-6)),
        _ => family.link(mean_y),
    };
    if raw.is_finite() {
        raw.clamp(-INTERCEPT_CAP, INTERCEPT_CAP)
    } else if raw > 0.0 {
        INTERCEPT_CAP
    } else {
        -INTERCEPT_CAP
    }
}

fn dmu_deta(family: Family, eta: f64) -> f64 {
    let d = match family {
        Family::GaussianIdentity => 1.0,
        Family::PoissonLog | Family::NegBinomialLog | Family::TweedieLog => exp(eta),
        Family::BernoulliLogit | Family::BetaLogit => {
            let mu = family.mean(eta);
            mu * (1.0 - mu)
        }
        Family::BernoulliProbit => norm_pdf(eta),
    };
    d.max(1e-8)
}

/// Dispersion used while fitting the mean model of the start GLM.
fn working_dispersion(family: Family, y: &DVector<f64>) -> f64 {
    match family {
        Family::GaussianIdentity => {
            let m = y.mean();
            sqrt(y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / y.len() as f64).max(1e-3)
        }
        Family::BetaLogit => 2.0,
        _ => 1.0,
    }
}

/// Newton-Raphson with step halving on the GLM log-likelihood.
fn fit_glm(family: Family, y: &DVector<f64>, x: &DMatrix<f64>, nu: f64) -> Option<Glm> {
    let (n, q) = (y.len(), x.ncols());
    let k = q + 1;
    let phi = working_dispersion(family, y);
    let design = |i: usize, c: usize| if c == 0 { 1.0 } else { x[(i, c - 1)] };
    let mut coef = DVector::zeros(k);
    coef[0] = fallback_intercept(family, y.mean());
    let loglik = |coef: &DVector<f64>| -> Option<(f64, DVector<f64>, DMatrix<f64>, DVector<f64>)> {
        let mut ll = 0.0;
        let mut grad = DVector::zeros(k);
        let mut info = DMatrix::zeros(k, k);
        let mut eta_v = DVector::zeros(n);
        for i in 0..n {
            let eta: f64 = (0..k).map(|c| design(i, c) * coef[c]).sum();
            let e = eval_trusted(family, y[i], eta, phi, nu).ok()?;
            if !e.logf.is_finite() {
                return None;
            }
            ll += e.logf;
            eta_v[i] = eta;
            for r in 0..k {
                grad[r] += e.d1 * design(i, r);
                for c in 0..k {
                    info[(r, c)] -= e.d2 * design(i, r) * design(i, c);
                }
            }
        }
        Some((ll, grad, info, eta_v))
    };
    let (mut ll, mut grad, mut info, mut eta) = loglik(&coef)?;
    for _ in 0..100 {
        if grad.amax() <= 1e-8 * (1.0 + fabs(ll)) {
            break;
        }
        let mut reg = info.clone();
        for r in 0..k {
            reg[(r, r)] += 1e-8 * (1.0 + fabs(info[(r, r)]));
        }
        let step = match reg.cholesky() {
            Some(ch) => ch.solve(&grad),
            None => &grad * 1e-3,
        };
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let cand = &coef + &step * t;
            if let Some((ll_c, g_c, i_c, e_c)) = loglik(&cand) {
                if ll_c >= ll {
                    coef = cand;
                    ll = ll_c;
                    grad = g_c;
                    info = i_c;
                    eta = e_c;
                    moved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    let ok = coef.iter().all(|c| c.is_finite() && fabs(*c) <= 30.0) && grad.amax() <= 1e-4 * (1.0 + fabs(ll));
    ok.then_some(Glm { coef, eta })
}

fn moment_dispersion(family: Family, y: &DVector<f64>, mu: &DVector<f64>, nu: f64, k: usize) -> f64 {
    let n = y.len() as f64;
    let dof = (n - k as f64).max(1.0);
    let r2 = |i: usize| (y[i] - mu[i]) * (y[i] - mu[i]);
    let v = match family {
        Family::GaussianIdentity => sqrt((0..y.len()).map(r2).sum::<f64>() / dof).max(1e-3),
        Family::NegBinomialLog => {
            let num: f64 = (0..y.len()).map(|i| r2(i) - mu[i]).sum();
            let den: f64 = mu.iter().map(|m| m * m).sum();
            (num / den).clamp(0.01, 10.0)
        }
        Family::TweedieLog => ((0..y.len()).map(|i| r2(i) / pow(mu[i], nu)).sum::<f64>() / dof).clamp(0.01, 100.0),
        Family::BetaLogit => {
            let v_mu: f64 = mu.iter().map(|m| m * (1.0 - m)).sum::<f64>() / n;
            let v_y: f64 = (0..y.len()).map(r2).sum::<f64>() / dof;
            (v_mu / v_y.max(1e-12) - 1.0).clamp(0.1, 1000.0)
        }
        _ => 1.0,
    };
    if v.is_finite() {
        v
    } else {
        1.0
    }
}

/// Top-`p` eigenvectors of the residual correlation matrix, rotated to a
/// lower-triangular matrix with positive diagonal and scaled down.
fn residual_loadings(resid: &DMatrix<f64>, p: usize) -> DMatrix<f64> {
    let (n, m) = (resid.nrows(), resid.ncols());
    let mut z = resid.clone();
    for j in 0..m {
        let col = z.column(j);
        let mean = col.mean();
        let sd = sqrt(col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64);
        for i in 0..n {
            z[(i, j)] = if sd > 1e-12 && sd.is_finite() { (z[(i, j)] - mean) / sd } else { 0.0 };
        }
    }
    let mut corr = z.transpose() * &z / n as f64;
    for j in 0..m {
        corr[(j, j)] = 1.0;
    }
    let eig = SymmetricEigen::new(corr);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]).then(a.cmp(b)));
    let mut lambda = DMatrix::zeros(m, p);
    for (k, &idx) in order.iter().take(p).enumerate() {
        let scale = sqrt(eig.eigenvalues[idx].max(0.0));
        // deterministic sign: largest-magnitude entry positive
        let col = eig.eigenvectors.column(idx);
        let pivot = col.iter().fold(0.0f64, |acc, v| if fabs(*v) > fabs(acc) { *v } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for j in 0..m {
            lambda[(j, k)] = sign * scale * col[j];
        }
    }
    // Lambda' = Q R  =>  Lambda Q = R' is lower triangular
    let qr = lambda.transpose().qr();
    let mut gamma = qr.r().transpose() * LOADING_SCALE;
    for k in 0..p {
        if gamma[(k, k)] < 0.0 {
            for j in 0..m {
                gamma[(j, k)] = -gamma[(j, k)];
            }
        }
        if gamma[(k, k)] < MIN_DIAGONAL {
            gamma[(k, k)] = MIN_DIAGONAL;
        }
        for c in (k + 1)..p {
            gamma[(k, c)] = 0.0;
        }
    }
    gamma
}

/// Adds `N(0, sd^2)` noise to every entry of a packed start.
pub fn jitter(theta: &mut [f64], seed: u64, start: usize, sd: f64) {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(start as u64);
    let normal = Normal::new(0.0, sd).expect("positive jitter scale");
    for v in theta.iter_mut() {
        *v += normal.sample(&mut rng);
    }
}
