//! Maximization of an approximate marginal likelihood over the packed
//! parameter vector, with multiple starts.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{initialize, jitter};
use crate::lbfgs::{minimize_guarded, LbfgsConfig, StopReason};
use crate::linalg::cholesky_lower;
use crate::model::{CovStructure, Family, ModelSpec, Parameters, ResponseData, VariationalParams};
use crate::objective::{Method, ModeCache, Problem};
use crate::profile::ProfileCache;

/// Standard deviation of the start perturbation for starts after the first.
pub const JITTER_SD: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub method: Method,
    pub max_iter: usize,
    /// Tolerance on the infinity norm of the packed gradient.
    pub grad_tol: f64,
    pub n_starts: usize,
    pub seed: u64,
    /// Structure of the variational covariances (ignored by Laplace).
    pub a_structure: CovStructure,
    pub strategy: Strategy,
    /// A run stops as diverged once any loading exceeds this in absolute
    /// value (non-Gaussian families only).
    pub max_loading: f64,
}

/// How variational parameters are optimized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Per-unit variational blocks solved exactly inside every evaluation;
    /// the quasi-Newton iteration runs over model parameters only. Falls
    /// back to `Joint` where no closed-form covariance update exists.
    #[default]
    Profiled,
    /// One quasi-Newton iteration over the full packed vector.
    Joint,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            method: Method::Eva,
            max_iter: 2000,
            grad_tol: 1e-6,
            n_starts: 3,
            seed: 0,
            a_structure: CovStructure::Full,
            strategy: Strategy::Profiled,
            max_loading: 10.0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.grad_tol > 0.0) || !self.grad_tol.is_finite() {
            return Err(Error::Config(alloc::format!("grad_tol must be positive, got {}", self.grad_tol)));
        }
        if self.n_starts == 0 {
            return Err(Error::Config("n_starts must be at least 1".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        if !(self.max_loading > 0.0) {
            return Err(Error::Config(alloc::format!("max_loading must be positive, got {}", self.max_loading)));
        }
        Ok(())
    }

    fn lbfgs(&self) -> LbfgsConfig {
        LbfgsConfig {
            max_iter: self.max_iter,
            grad_tol: self.grad_tol,
            ..LbfgsConfig::default()
        }
    }
}

/// Source of wall-clock time in seconds (the core crate has no clock).
pub trait Clock {
    fn now(&self) -> f64;
}

/// Clock that always reads zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn now(&self) -> f64 {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub method: Method,
    pub structure: CovStructure,
    pub params: Parameters,
    /// Variational means and factors; for Laplace fits, the modes and the
    /// Cholesky factors of the inverse negative Hessians.
    pub varparams: VariationalParams,
    pub objective: f64,
    pub converged: bool,
    pub stop_reason: StopReason,
    pub iterations: usize,
    pub evaluations: usize,
    pub grad_norm: f64,
    pub wall_time_s: f64,
    /// Packed optimum (model parameters only for Laplace).
    pub theta: Vec<f64>,
    /// Index of the winning start.
    pub start_index: usize,
    pub warnings: Vec<String>,
}

impl FitResult {
    /// Problem definition matching this fit.
    pub fn problem<'a>(&self, spec: &'a ModelSpec, data: &'a ResponseData) -> Result<Problem<'a>> {
        Problem::new(spec, data, self.method, self.structure)
    }
}

/// Fits the model without timing.
pub fn fit(spec: &ModelSpec, data: &ResponseData, config: &FitConfig) -> Result<FitResult> {
    fit_with_clock(spec, data, config, &NoClock)
}

struct Candidate {
    theta: Vec<f64>,
    objective: f64,
    grad_norm: f64,
    stop_reason: StopReason,
    iterations: usize,
    evaluations: usize,
    start: usize,
    cache: Option<ModeCache>,
}

enum Cache {
    None,
    Modes(ModeCache),
    Profile(ProfileCache),
}

impl Candidate {
    fn beats(&self, other: &Candidate) -> bool {
        let (da, db) = (self.stop_reason == StopReason::Diverged, other.stop_reason == StopReason::Diverged);
        if da != db {
            return db;
        }
        if self.objective != other.objective {
            return self.objective > other.objective;
        }
        if self.grad_norm != other.grad_norm {
            return self.grad_norm < other.grad_norm;
        }
        self.start < other.start
    }
}

pub fn fit_with_clock<C: Clock + ?Sized>(
    spec: &ModelSpec,
    data: &ResponseData,
    config: &FitConfig,
    clock: &C,
) -> Result<FitResult> {
    let t0 = clock.now();
    config.validate()?;
    let problem = Problem::new(spec, data, config.method, config.a_structure)?;
    let init = initialize(spec, data)?;
    let var = config.method.is_variational().then_some(&init.var);
    let base = problem.layout.pack(spec, &init.params, var)?.into_inner();
    let lcfg = config.lbfgs();
    let mut warnings = init.warnings.clone();
    let mut best: Option<Candidate> = None;

    let profiled = config.strategy == Strategy::Profiled && problem.supports_profile();
    let x_len = if profiled { problem.layout.psi_len } else { problem.dim() };

    for start in 0..config.n_starts {
        let mut theta0 = base[..x_len].to_vec();
        if start > 0 {
            jitter(&mut theta0, config.seed, start, JITTER_SD);
        }
        let mut cache = if profiled {
            Cache::Profile(ProfileCache::new(&problem))
        } else if config.method.is_variational() {
            Cache::None
        } else {
            Cache::Modes(ModeCache::new(spec.n, spec.p))
        };
        let mut objective = |x: &[f64], g: &mut [f64]| -> Option<f64> {
            let v = match &mut cache {
                Cache::None => problem.value_grad(x, g, None),
                Cache::Modes(c) => problem.value_grad(x, g, Some(c)),
                Cache::Profile(c) => problem.profile_value_grad(x, g, c),
            }
            .ok()?;
            if !v.is_finite() || g.iter().any(|d| !d.is_finite()) {
                return None;
            }
            for d in g.iter_mut() {
                *d = -*d;
            }
            Some(-v)
        };
        let guarded = spec.family != Family::GaussianIdentity;
        let diverged = |x: &[f64]| {
            guarded && problem.layout.gamma_unchecked(x).iter().any(|v| !(v.abs() <= config.max_loading))
        };
        let res = minimize_guarded(&mut objective, &theta0, &lcfg, &diverged);
        if res.stop_reason == StopReason::NonFiniteStart {
            warnings.push(alloc::format!("start {start}: objective not finite at the starting point"));
            continue;
        }
        let mut theta = res.x;
        let mut modes = None;
        match cache {
            Cache::Profile(mut c) => {
                // the cache may hold the last trial point; re-solve at the optimum
                let mut g = vec![0.0; x_len];
                problem.profile_value_grad(&theta, &mut g, &mut c)?;
                theta = c.theta;
            }
            Cache::Modes(c) => modes = Some(c),
            Cache::None => {}
        }
        let cand = Candidate {
            objective: -res.f,
            grad_norm: res.grad_norm,
            stop_reason: res.stop_reason,
            iterations: res.iterations,
            evaluations: res.evaluations,
            theta,
            start,
            cache: modes,
        };
        if best.as_ref().map_or(true, |b| cand.beats(b)) {
            best = Some(cand);
        }
    }

    let best = best.ok_or(Error::AllStartsNonFinite)?;
    let (params, varparams) = if config.method.is_variational() {
        problem.layout.unpack(&best.theta, spec)?
    } else {
        let params = problem.layout.unpack_params(&best.theta, spec)?;
        let modes = problem.laplace_modes(&best.theta, best.cache.as_ref())?;
        let mut a = DMatrix::zeros(spec.n, spec.p);
        let mut chol = Vec::with_capacity(spec.n);
        for (i, um) in modes.iter().enumerate() {
            a.set_row(i, &um.mode.transpose());
            chol.push(cholesky_lower(&um.covariance).unwrap_or_else(|| DMatrix::identity(spec.p, spec.p)));
        }
        (params, VariationalParams { a, chol })
    };
    if best.stop_reason == StopReason::Diverged {
        warnings.push(alloc::format!("loadings diverged: |gamma| exceeded {}", config.max_loading));
    } else if !best.stop_reason.converged() {
        warnings.push(alloc::format!("optimizer stopped without converging: {:?}", best.stop_reason));
    }
    Ok(FitResult {
        method: config.method,
        structure: config.a_structure,
        params,
        varparams,
        objective: best.objective,
        converged: best.stop_reason.converged(),
        stop_reason: best.stop_reason,
        iterations: best.iterations,
        evaluations: best.evaluations,
        grad_norm: best.grad_norm,
        wall_time_s: clock.now() - t0,
        theta: best.theta,
        start_index: best.start,
        warnings,
    })
}

/// Packed gradient of the fitted objective (sign: ascent direction).
pub fn fitted_gradient(fit: &FitResult, spec: &ModelSpec, data: &ResponseData) -> Result<Vec<f64>> {
    let problem = fit.problem(spec, data)?;
    let mut g = vec![0.0; problem.dim()];
    let mut cache = ModeCache::new(spec.n, spec.p);
    if !fit.method.is_variational() {
        cache.modes = (0..spec.n).map(|i| fit.varparams.mean(i)).collect();
    }
    problem.value_grad(&fit.theta, &mut g, Some(&mut cache))?;
    Ok(g)
}
