//! Post-fit inference: observed information, Wald intervals, prediction
//! covariances for the latent scores, randomized quantile residuals and
//! variance explained.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use libm::{exp, fabs, sqrt};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::FitResult;
use crate::linalg::{psd_project, symmetric_condition, symmetric_pinv, symmetrize};
use crate::model::{linear_predictor, Layout, ModelSpec, Parameters, ResponseData};
use crate::objective::{ModeCache, Problem};
use crate::simulate::stream_rng;
use crate::special::norm_quantile;

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959963984540054;
/// 0.95 quantile of the chi-square distribution with two degrees of freedom.
pub const CHI2_2_95: f64 = 5.991464547107979;
/// Relative finite-difference step, scaled by `1 + |theta_k|`.
pub const FD_STEP: f64 = 1e-5;
/// Eigenvalues below this fraction of the largest are dropped by the
/// pseudo-inverse fallback.
const PINV_TOL: f64 = 1e-10;
/// Clamp applied to CDF values before the normal quantile.
const CDF_CLAMP: f64 = 1e-12;

/// Information blocks of one unit's variational parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitInformation {
    /// Negative Hessian within the unit's block (`a_i` then Cholesky entries).
    pub own: DMatrix<f64>,
    /// Negative cross Hessian with the model parameters, `xi_len x psi_len`.
    pub cross: DMatrix<f64>,
}

/// Observed information `-d^2 l / d theta d theta'` in block form.
///
/// Units interact only through the model parameters, so the matrix is stored
/// as the model-parameter block plus one own block and one cross block per
/// unit. Laplace fits have no unit blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservedInformation {
    pub psi: DMatrix<f64>,
    pub units: Vec<UnitInformation>,
    /// Model-parameter block of the inverse information.
    pub psi_inverse: DMatrix<f64>,
    /// Condition number of the model-parameter information after the
    /// variational blocks are eliminated.
    pub condition: f64,
    pub notes: Vec<String>,
}

impl ObservedInformation {
    /// The full symmetric matrix in packed order.
    pub fn dense(&self, layout: &Layout) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(layout.len, layout.len);
        let pl = layout.psi_len;
        out.view_mut((0, 0), (pl, pl)).copy_from(&self.psi);
        for (i, u) in self.units.iter().enumerate() {
            let idx = layout.xi_indices(i);
            for (r, &ir) in idx.iter().enumerate() {
                for (c, &ic) in idx.iter().enumerate() {
                    out[(ir, ic)] = u.own[(r, c)];
                }
                for k in 0..pl {
                    out[(ir, k)] = u.cross[(r, k)];
                    out[(k, ir)] = u.cross[(r, k)];
                }
            }
        }
        out
    }
}

fn fd_step(v: f64) -> f64 {
    FD_STEP * (1.0 + fabs(v))
}

/// Negative Hessian of a function from central differences of its gradient,
/// symmetrized. `grad` writes the gradient at its first argument.
pub fn fd_information<F>(mut grad: F, theta: &[f64]) -> Result<DMatrix<f64>>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    let d = theta.len();
    let mut out = DMatrix::zeros(d, d);
    let mut t = theta.to_vec();
    let mut gp = vec![0.0; d];
    let mut gm = vec![0.0; d];
    for k in 0..d {
        let h = fd_step(theta[k]);
        t[k] = theta[k] + h;
        grad(&t, &mut gp)?;
        t[k] = theta[k] - h;
        grad(&t, &mut gm)?;
        t[k] = theta[k];
        for r in 0..d {
            out[(r, k)] = -(gp[r] - gm[r]) / (2.0 * h);
        }
    }
    symmetrize(&mut out);
    Ok(out)
}

/// Observed information of a fitted model at its optimum.
pub fn observed_information(fit: &FitResult, spec: &ModelSpec, data: &ResponseData) -> Result<ObservedInformation> {
    let problem = fit.problem(spec, data)?;
    let lay = &problem.layout;
    let mut notes = Vec::new();
    if !fit.converged {
        notes.push(String::from("fit did not converge; information evaluated at the last iterate"));
    }
    let (psi, units) = if fit.method.is_variational() {
        variational_blocks(&problem, &fit.theta)?
    } else {
        let cache = ModeCache {
            modes: (0..spec.n).map(|i| fit.varparams.mean(i)).collect(),
        };
        let info = fd_information(
            |x, g| {
                let mut c = cache.clone();
                problem.value_grad(x, g, Some(&mut c)).map(|_| ())
            },
            &fit.theta[..lay.psi_len],
        )?;
        (info, Vec::new())
    };
    let schur = eliminate_units(&psi, &units, &mut notes);
    let condition = symmetric_condition(&schur);
    let psi_inverse = match Cholesky::new(schur.clone()) {
        Some(ch) => {
            let mut inv = ch.inverse();
            symmetrize(&mut inv);
            inv
        }
        None => {
            let pinv = symmetric_pinv(&schur, PINV_TOL);
            notes.push(format!(
                "information is not positive definite ({} near-zero and {} negative eigenvalues); pseudo-inverse reported",
                pinv.dropped, pinv.negative
            ));
            pinv.inverse
        }
    };
    Ok(ObservedInformation {
        psi,
        units,
        psi_inverse,
        condition,
        notes,
    })
}

/// Finite-difference blocks of a variational objective. Perturbing the same
/// within-unit coordinate of every unit at once recovers all own blocks,
/// because a unit's gradient depends only on its own block and the model
/// parameters.
fn variational_blocks(problem: &Problem, theta: &[f64]) -> Result<(DMatrix<f64>, Vec<UnitInformation>)> {
    let lay = &problem.layout;
    let (n, pl, xl) = (lay.n, lay.psi_len, lay.xi_len());
    let idx: Vec<Vec<usize>> = (0..n).map(|i| lay.xi_indices(i)).collect();
    let mut psi = DMatrix::zeros(pl, pl);
    let mut units: Vec<UnitInformation> = (0..n)
        .map(|_| UnitInformation {
            own: DMatrix::zeros(xl, xl),
            cross: DMatrix::zeros(xl, pl),
        })
        .collect();
    let mut t = theta.to_vec();
    let mut gp = vec![0.0; lay.len];
    let mut gm = vec![0.0; lay.len];
    for k in 0..pl {
        let h = fd_step(theta[k]);
        t[k] = theta[k] + h;
        problem.value_grad(&t, &mut gp, None)?;
        t[k] = theta[k] - h;
        problem.value_grad(&t, &mut gm, None)?;
        t[k] = theta[k];
        for r in 0..pl {
            psi[(r, k)] = -(gp[r] - gm[r]) / (2.0 * h);
        }
        for (u, ix) in units.iter_mut().zip(&idx) {
            for (r, &ir) in ix.iter().enumerate() {
                u.cross[(r, k)] = -(gp[ir] - gm[ir]) / (2.0 * h);
            }
        }
    }
    for c in 0..xl {
        for ix in &idx {
            t[ix[c]] = theta[ix[c]] + fd_step(theta[ix[c]]);
        }
        problem.value_grad(&t, &mut gp, None)?;
        for ix in &idx {
            t[ix[c]] = theta[ix[c]] - fd_step(theta[ix[c]]);
        }
        problem.value_grad(&t, &mut gm, None)?;
        for (u, ix) in units.iter_mut().zip(&idx) {
            let h = fd_step(theta[ix[c]]);
            t[ix[c]] = theta[ix[c]];
            for (r, &ir) in ix.iter().enumerate() {
                u.own[(r, c)] = -(gp[ir] - gm[ir]) / (2.0 * h);
            }
        }
    }
    symmetrize(&mut psi);
    for u in units.iter_mut() {
        symmetrize(&mut u.own);
    }
    Ok((psi, units))
}

/// `I_psi - sum_i C_i' O_i^{-1} C_i`, whose inverse is the model-parameter
/// block of the inverse information.
fn eliminate_units(psi: &DMatrix<f64>, units: &[UnitInformation], notes: &mut Vec<String>) -> DMatrix<f64> {
    let mut schur = psi.clone();
    let mut singular = 0;
    for u in units {
        let solved = match Cholesky::new(u.own.clone()) {
            Some(ch) => ch.solve(&u.cross),
            None => {
                singular += 1;
                symmetric_pinv(&u.own, PINV_TOL).inverse * &u.cross
            }
        };
        schur -= u.cross.transpose() * solved;
    }
    if singular > 0 {
        notes.push(format!(
            "{singular} unit block(s) of the information are not positive definite; pseudo-inverses used"
        ));
    }
    symmetrize(&mut schur);
    schur
}

/// A Wald interval for one packed model parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaldInterval {
    pub name: String,
    /// Estimate on the natural scale.
    pub estimate: f64,
    /// Standard error on the natural scale (delta method for log-scale
    /// parameters).
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
    /// Whether the interval was built on the log scale and mapped back.
    pub log_scale: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceReport {
    pub z: f64,
    pub se: Parameters,
    pub ci_lower: Parameters,
    pub ci_upper: Parameters,
    pub intervals: Vec<WaldInterval>,
    pub info_condition: f64,
    pub notes: Vec<String>,
}

/// What a packed model-parameter index refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRef {
    Beta0(usize),
    B(usize, usize),
    Gamma(usize, usize),
    Phi(usize),
    Alpha(usize),
}

impl ParamRef {
    pub fn name(self) -> String {
        match self {
            ParamRef::Beta0(j) => format!("beta0[{j}]"),
            ParamRef::B(j, c) => format!("b[{j},{c}]"),
            ParamRef::Gamma(j, k) => format!("gamma[{j},{k}]"),
            ParamRef::Phi(j) => format!("phi[{j}]"),
            ParamRef::Alpha(i) => format!("alpha[{i}]"),
        }
    }

    pub fn log_scale(self) -> bool {
        matches!(self, ParamRef::Phi(_)) || matches!(self, ParamRef::Gamma(j, k) if j == k)
    }
}

/// Parameter referred to by each packed model-parameter index.
pub fn param_refs(layout: &Layout) -> Vec<ParamRef> {
    let mut out = Vec::with_capacity(layout.psi_len);
    out.extend((0..layout.m).map(ParamRef::Beta0));
    for c in 0..layout.q {
        out.extend((0..layout.m).map(|j| ParamRef::B(j, c)));
    }
    for k in 0..layout.p {
        out.extend((k..layout.m).map(|j| ParamRef::Gamma(j, k)));
    }
    if layout.has_phi {
        out.extend((0..layout.m).map(ParamRef::Phi));
    }
    if layout.row_effects {
        out.extend((1..layout.n).map(ParamRef::Alpha));
    }
    debug_assert_eq!(out.len(), layout.psi_len);
    out
}

fn zeroed(p: &Parameters) -> Parameters {
    Parameters {
        beta0: DVector::zeros(p.beta0.len()),
        b: DMatrix::zeros(p.b.nrows(), p.b.ncols()),
        gamma: DMatrix::zeros(p.gamma.nrows(), p.gamma.ncols()),
        phi: p.phi.as_ref().map(|v| DVector::zeros(v.len())),
        alpha: p.alpha.as_ref().map(|v| DVector::zeros(v.len())),
        nu: p.nu,
    }
}

fn set(p: &mut Parameters, r: ParamRef, v: f64) {
    match r {
        ParamRef::Beta0(j) => p.beta0[j] = v,
        ParamRef::B(j, c) => p.b[(j, c)] = v,
        ParamRef::Gamma(j, k) => p.gamma[(j, k)] = v,
        ParamRef::Phi(j) => {
            if let Some(phi) = p.phi.as_mut() {
                phi[j] = v;
            }
        }
        ParamRef::Alpha(i) => {
            if let Some(alpha) = p.alpha.as_mut() {
                alpha[i] = v;
            }
        }
    }
}

/// Interval `t +- z se` on the packed scale, mapped back by `exp` when the
/// parameter is stored on the log scale.
pub fn wald_interval(t: f64, se: f64, z: f64, log_scale: bool) -> (f64, f64) {
    if log_scale {
        (exp(t - z * se), exp(t + z * se))
    } else {
        (t - z * se, t + z * se)
    }
}

/// Wald intervals `estimate +- z se`; log-scale parameters (dispersions and
/// loading diagonals) get intervals on the log scale mapped back by `exp`.
/// Structural zeros and the reference row effect have zero width.
pub fn wald(fit: &FitResult, spec: &ModelSpec, info: &ObservedInformation, z: f64) -> Result<InferenceReport> {
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::Config(format!("z multiplier must be positive, got {z}")));
    }
    let layout = Layout::psi_only(spec);
    let refs = param_refs(&layout);
    let mut se = zeroed(&fit.params);
    let mut lo = fit.params.clone();
    let mut hi = fit.params.clone();
    let mut intervals = Vec::with_capacity(refs.len());
    let mut notes = info.notes.clone();
    let mut bad = 0;
    for (k, r) in refs.iter().enumerate() {
        let t = fit.theta[k];
        let var = info.psi_inverse[(k, k)];
        let s = if var >= 0.0 { sqrt(var) } else { f64::NAN };
        if !s.is_finite() {
            bad += 1;
        }
        let (lower, upper) = wald_interval(t, s, z, r.log_scale());
        let (estimate, se_nat) = if r.log_scale() { (exp(t), exp(t) * s) } else { (t, s) };
        set(&mut se, *r, se_nat);
        set(&mut lo, *r, lower);
        set(&mut hi, *r, upper);
        intervals.push(WaldInterval {
            name: r.name(),
            estimate,
            se: se_nat,
            lower,
            upper,
            log_scale: r.log_scale(),
        });
    }
    if bad > 0 {
        notes.push(format!("{bad} parameter(s) have a negative variance estimate; their standard errors are NaN"));
    }
    Ok(InferenceReport {
        z,
        se,
        ci_lower: lo,
        ci_upper: hi,
        intervals,
        info_condition: info.condition,
        notes,
    })
}

/// Prediction covariances of the latent scores.
#[derive(Clone, Debug, PartialEq)]
pub struct Cmsep {
    pub matrices: Vec<DMatrix<f64>>,
    pub notes: Vec<String>,
}

/// `A_i + Q_i I_psi^{-1} Q_i'`, where `Q_i` is the sensitivity of the
/// predicted score to the model parameters. For variational fits
/// `Q_i = (d^2 l / da_i da_i')^{-1} d^2 l / da_i dpsi'` with the unit's other
/// variational parameters held at their fitted values; for Laplace fits
/// `Q_i` is the derivative of the mode, by central differences.
pub fn cmsep(fit: &FitResult, spec: &ModelSpec, data: &ResponseData, info: &ObservedInformation) -> Result<Cmsep> {
    let p = spec.p;
    let problem = fit.problem(spec, data)?;
    let pl = problem.layout.psi_len;
    let mut notes = Vec::new();
    let sens: Vec<DMatrix<f64>> = if fit.method.is_variational() {
        info.units
            .iter()
            .map(|u| {
                let own = u.own.view((0, 0), (p, p)).into_owned();
                let cross = u.cross.rows(0, p).into_owned();
                match Cholesky::new(own.clone()) {
                    Some(ch) => ch.solve(&cross),
                    None => symmetric_pinv(&own, PINV_TOL).inverse * cross,
                }
            })
            .collect()
    } else {
        let cache = ModeCache {
            modes: (0..spec.n).map(|i| fit.varparams.mean(i)).collect(),
        };
        let mut out = vec![DMatrix::zeros(p, pl); spec.n];
        let mut t = fit.theta[..pl].to_vec();
        for k in 0..pl {
            let h = fd_step(t[k]);
            let base = t[k];
            t[k] = base + h;
            let up = problem.laplace_modes(&t, Some(&cache))?;
            t[k] = base - h;
            let down = problem.laplace_modes(&t, Some(&cache))?;
            t[k] = base;
            for (i, s) in out.iter_mut().enumerate() {
                for r in 0..p {
                    s[(r, k)] = (up[i].mode[r] - down[i].mode[r]) / (2.0 * h);
                }
            }
        }
        out
    };
    let mut projected = 0;
    let matrices = sens
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let mut c = fit.varparams.covariance(i) + q * &info.psi_inverse * q.transpose();
            symmetrize(&mut c);
            let (c, clipped) = psd_project(&c);
            if clipped {
                projected += 1;
            }
            c
        })
        .collect();
    if projected > 0 {
        notes.push(format!("{projected} prediction covariance(s) projected onto the PSD cone"));
    }
    Ok(Cmsep { matrices, notes })
}

/// Predicted scores, loadings and prediction covariances.
#[derive(Clone, Debug, PartialEq)]
pub struct OrdinationOutput {
    pub scores: DMatrix<f64>,
    pub loadings: DMatrix<f64>,
    pub region_cov: Vec<DMatrix<f64>>,
}

pub fn ordination(fit: &FitResult, cmsep: &Cmsep) -> OrdinationOutput {
    OrdinationOutput {
        scores: fit.varparams.a.clone(),
        loadings: fit.params.gamma.clone(),
        region_cov: cmsep.matrices.clone(),
    }
}

/// 95% prediction ellipse of a two-dimensional score: the set
/// `(u - center)' cov^{-1} (u - center) <= radius^2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: [f64; 2],
    pub cov: [[f64; 2]; 2],
    pub radius: f64,
}

impl OrdinationOutput {
    /// Ellipses for `p = 2`; `None` otherwise.
    pub fn ellipses(&self) -> Option<Vec<Ellipse>> {
        if self.scores.ncols() != 2 {
            return None;
        }
        Some(
            self.region_cov
                .iter()
                .enumerate()
                .map(|(i, c)| Ellipse {
                    center: [self.scores[(i, 0)], self.scores[(i, 1)]],
                    cov: [[c[(0, 0)], c[(0, 1)]], [c[(1, 0)], c[(1, 1)]]],
                    radius: sqrt(CHI2_2_95),
                })
                .collect(),
        )
    }

    /// Per-unit, per-dimension marginal intervals `score +- z sd`.
    pub fn marginal_intervals(&self, z: f64) -> Vec<Vec<(f64, f64)>> {
        self.region_cov
            .iter()
            .enumerate()
            .map(|(i, c)| {
                (0..self.scores.ncols())
                    .map(|k| {
                        let s = sqrt(c[(k, k)].max(0.0));
                        (self.scores[(i, k)] - z * s, self.scores[(i, k)] + z * s)
                    })
                    .collect()
            })
            .collect()
    }
}

/// Randomized quantile residuals `Phi^{-1}(c)`, `c ~ Unif(F(y-), F(y))`,
/// evaluated at the predicted scores. Cell `(i, j)` draws from stream
/// `i m + j` of `seed`; continuous cells use no randomness.
pub fn dunn_smyth_residuals(fit: &FitResult, spec: &ModelSpec, data: &ResponseData, seed: u64) -> Result<DMatrix<f64>> {
    let eta = linear_predictor(spec, &fit.params, &data.x, &fit.varparams.a)?;
    let nu = spec.nu();
    let mut out = DMatrix::zeros(spec.n, spec.m);
    for i in 0..spec.n {
        for j in 0..spec.m {
            let cdf = spec.family.cdf(data.y[(i, j)], eta[(i, j)], fit.params.phi_j(j), nu)?;
            let c = if cdf.upper > cdf.lower {
                let mut rng = stream_rng(seed, (i * spec.m + j) as u64);
                cdf.lower + (cdf.upper - cdf.lower) * rng.gen::<f64>()
            } else {
                cdf.upper
            };
            out[(i, j)] = norm_quantile(c.clamp(CDF_CLAMP, 1.0 - CDF_CLAMP));
        }
    }
    Ok(out)
}

/// `1 - tr(Sigma_cov) / tr(Sigma_null)` with `Sigma = Gamma Gamma'`.
pub fn variance_explained(null: &Parameters, with_covariates: &Parameters) -> Result<f64> {
    let t_null = null.gamma.norm_squared();
    if !(t_null > 0.0) {
        return Err(Error::ZeroTrace);
    }
    Ok(1.0 - with_covariates.gamma.norm_squared() / t_null)
}
