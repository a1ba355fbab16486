//! Replicate studies: simulate from a known truth, fit each method and
//! summarize estimation accuracy, interval coverage, ordination recovery
//! and timing.

use std::path::PathBuf;

use eva_gllvm_core::inference::Z_95;
use eva_gllvm_core::simulate::{simulate_dataset, stream_rng, synthetic_covariates, synthetic_truth};
use eva_gllvm_core::{
    cmsep, fit_with_clock, observed_information, procrustes_error, wald, Family, FitConfig, Method, ModelSpec,
    Parameters,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::io::{self, fmt_f64, ParametersJson};
use crate::StdClock;

/// Stream used for synthetic truths; replicate streams are `grid << 32 | r`.
pub const TRUTH_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum TruthSource {
    /// Intercepts and slopes `Unif(-1, 1)`, constrained loadings and family
    /// specific dispersions drawn once per study.
    Synthetic,
    /// A parameters JSON file with at least as many responses as the largest
    /// grid value; the first `m` responses are used.
    File { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub family: Family,
    pub n_grid: Vec<usize>,
    pub m_grid: Vec<usize>,
    pub p: usize,
    #[serde(default = "default_q")]
    pub q: usize,
    #[serde(default = "default_replicates")]
    pub n_replicates: usize,
    #[serde(default = "default_truth")]
    pub truth: TruthSource,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tweedie_power: Option<f64>,
    /// Optimizer settings shared by all methods (`method` is overridden).
    #[serde(default = "default_fit")]
    pub fit: FitConfig,
    /// Compute Wald coverage and prediction-covariance checks.
    #[serde(default = "default_inference")]
    pub inference: bool,
}

fn default_q() -> usize {
    1
}
fn default_replicates() -> usize {
    200
}
fn default_truth() -> TruthSource {
    TruthSource::Synthetic
}
fn default_methods() -> Vec<Method> {
    vec![Method::Eva, Method::Laplace]
}
fn default_fit() -> FitConfig {
    FitConfig {
        n_starts: 1,
        ..FitConfig::default()
    }
}
fn default_inference() -> bool {
    true
}

#[derive(Debug, thiserror::Error)]
pub enum StudyError {
    #[error("invalid study configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::IoError),
}

impl StudyConfig {
    pub fn new(family: Family, n_grid: Vec<usize>, m_grid: Vec<usize>, p: usize) -> Self {
        StudyConfig {
            family,
            n_grid,
            m_grid,
            p,
            q: default_q(),
            n_replicates: default_replicates(),
            truth: default_truth(),
            methods: default_methods(),
            seed: 0,
            tweedie_power: None,
            fit: default_fit(),
            inference: true,
        }
    }

    /// Grid points in study order.
    pub fn grid(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &n in &self.n_grid {
            for &m in &self.m_grid {
                out.push(GridPoint { n, m });
            }
        }
        out
    }

    fn spec(&self, n: usize, m: usize) -> Result<ModelSpec, StudyError> {
        let mut spec = ModelSpec::new(self.family, n, m, self.p, self.q).map_err(|e| StudyError::Config(e.to_string()))?;
        if let Some(nu) = self.tweedie_power {
            spec = spec.with_tweedie_power(nu).map_err(|e| StudyError::Config(e.to_string()))?;
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), StudyError> {
        let bad = |msg: String| Err(StudyError::Config(msg));
        if self.n_grid.is_empty() || self.m_grid.is_empty() {
            return bad("n_grid and m_grid must be non-empty".into());
        }
        if self.n_grid.len() > 1 && self.m_grid.len() > 1 {
            return bad("only one of n_grid and m_grid may vary".into());
        }
        if self.n_replicates == 0 {
            return bad("n_replicates must be at least 1".into());
        }
        if self.methods.is_empty() {
            return bad("methods must be non-empty".into());
        }
        for (k, method) in self.methods.iter().enumerate() {
            if self.methods[..k].contains(method) {
                return bad(format!("method {method} listed twice"));
            }
            method.check_family(self.family).map_err(|e| StudyError::Config(e.to_string()))?;
        }
        if self.fit.n_starts == 0 || !(self.fit.grad_tol > 0.0) {
            return bad("fit.n_starts must be >= 1 and fit.grad_tol > 0".into());
        }
        for g in self.grid() {
            self.spec(g.n, g.m)?;
        }
        Ok(())
    }

    fn max_spec(&self) -> Result<ModelSpec, StudyError> {
        let n = *self.n_grid.iter().max().expect("validated");
        let m = *self.m_grid.iter().max().expect("validated");
        self.spec(n, m)
    }

    /// True parameters for the largest response count.
    pub fn truth(&self) -> Result<Parameters, StudyError> {
        let spec = self.max_spec()?;
        match &self.truth {
            TruthSource::Synthetic => Ok(synthetic_truth(&spec, &mut stream_rng(self.seed, TRUTH_STREAM))),
            TruthSource::File { path } => {
                let json: ParametersJson = io::read_config(path)?;
                let full = json.to_parameters(self.q, self.p).map_err(StudyError::Config)?;
                if full.beta0.len() < spec.m {
                    return Err(StudyError::Config(format!(
                        "truth file has {} responses, the grid needs {}",
                        full.beta0.len(),
                        spec.m
                    )));
                }
                let truth = first_responses(&full, spec.m);
                truth.validate(&spec).map_err(|e| StudyError::Config(e.to_string()))?;
                Ok(truth)
            }
        }
    }
}

fn first_responses(p: &Parameters, m: usize) -> Parameters {
    Parameters {
        beta0: p.beta0.rows(0, m).into_owned(),
        b: p.b.rows(0, m).into_owned(),
        gamma: p.gamma.rows(0, m).into_owned(),
        phi: p.phi.as_ref().map(|v| v.rows(0, m).into_owned()),
        alpha: None,
        nu: p.nu,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridPoint {
    pub n: usize,
    pub m: usize,
}

/// Outcome of one method on one simulated dataset.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReplicateRecord {
    pub grid: usize,
    pub replicate: usize,
    pub method: Method,
    /// Fit error or non-finite objective.
    pub failed: bool,
    pub error: Option<String>,
    pub converged: bool,
    pub objective: Option<f64>,
    /// Slope estimates, response-major (m x q).
    pub slopes: Vec<f64>,
    pub slope_errors: Vec<f64>,
    pub intercept_errors: Vec<f64>,
    /// Per slope: whether the Wald interval contains the truth (`None` when
    /// the standard error is not finite).
    pub slope_covered: Vec<Option<bool>>,
    pub procrustes_scores: Option<f64>,
    pub procrustes_loadings: Option<f64>,
    /// Units whose prediction covariance trace fell below the variational one.
    pub cmsep_violations: usize,
    /// Whether the inverse information block needed a pseudo-inverse.
    pub information_notes: usize,
    #[serde(skip)]
    pub time_s: f64,
}

/// Summary for one method at one grid point.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudyRow {
    pub method: Method,
    pub n: usize,
    pub m: usize,
    pub fits: usize,
    pub failures: usize,
    pub nonconverged: usize,
    pub slope_bias: f64,
    pub slope_rmse: f64,
    pub intercept_bias: f64,
    pub intercept_rmse: f64,
    pub slope_coverage: f64,
    pub coverage_intervals: usize,
    pub procrustes_scores: f64,
    pub procrustes_loadings: f64,
    pub cmsep_violations: usize,
    pub information_notes: usize,
    #[serde(skip)]
    pub mean_time_s: f64,
}

/// Agreement between two methods on the same datasets.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairRow {
    pub method_a: Method,
    pub method_b: Method,
    pub n: usize,
    pub m: usize,
    pub datasets: usize,
    /// Mean absolute difference of slope estimates.
    pub mean_abs_slope_difference: f64,
    /// Mean of the two methods' slope RMSEs.
    pub common_rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudyReport {
    pub config: StudyConfig,
    pub grid: Vec<GridPoint>,
    pub rows: Vec<StudyRow>,
    pub pairs: Vec<PairRow>,
    pub replicates: Vec<ReplicateRecord>,
}

/// Runs every replicate of every grid point. Replicates run in parallel on
/// the current rayon pool and are merged in index order.
pub fn run_study(config: &StudyConfig) -> Result<StudyReport, StudyError> {
    config.validate()?;
    let truth = config.truth()?;
    let grid = config.grid();
    let mut tasks = Vec::new();
    for g in 0..grid.len() {
        for r in 0..config.n_replicates {
            tasks.push((g, r));
        }
    }
    let records: Vec<Vec<ReplicateRecord>> = tasks
        .par_iter()
        .map(|&(g, r)| run_replicate(config, &truth, g, grid[g], r))
        .collect::<Result<_, _>>()?;
    let replicates: Vec<ReplicateRecord> = records.into_iter().flatten().collect();
    let mut rows = Vec::new();
    let mut pairs = Vec::new();
    for (g, point) in grid.iter().enumerate() {
        let at: Vec<&ReplicateRecord> = replicates.iter().filter(|r| r.grid == g).collect();
        let start = rows.len();
        for &method in &config.methods {
            let recs: Vec<&ReplicateRecord> = at.iter().copied().filter(|r| r.method == method).collect();
            rows.push(summarize(method, *point, &recs));
        }
        for a in 0..config.methods.len() {
            for b in a + 1..config.methods.len() {
                pairs.push(compare(&config.methods, a, b, *point, &at, &rows[start..]));
            }
        }
    }
    Ok(StudyReport {
        config: config.clone(),
        grid,
        rows,
        pairs,
        replicates,
    })
}

fn run_replicate(
    config: &StudyConfig,
    full_truth: &Parameters,
    g: usize,
    point: GridPoint,
    r: usize,
) -> Result<Vec<ReplicateRecord>, StudyError> {
    let spec = config.spec(point.n, point.m)?;
    let truth = first_responses(full_truth, point.m);
    let stream = ((g as u64) << 32) | r as u64;
    let mut rng = stream_rng(config.seed, stream);
    let x = synthetic_covariates(point.n, config.q, &mut rng);
    let sim = simulate_dataset(&spec, &truth, &x, None, &mut rng).map_err(|e| StudyError::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(config.methods.len());
    for &method in &config.methods {
        let cfg = FitConfig {
            method,
            seed: config.seed ^ stream,
            ..config.fit
        };
        let mut rec = ReplicateRecord {
            grid: g,
            replicate: r,
            method,
            failed: true,
            error: None,
            converged: false,
            objective: None,
            slopes: Vec::new(),
            slope_errors: Vec::new(),
            intercept_errors: Vec::new(),
            slope_covered: Vec::new(),
            procrustes_scores: None,
            procrustes_loadings: None,
            cmsep_violations: 0,
            information_notes: 0,
            time_s: 0.0,
        };
        let clock = StdClock::new();
        let result = fit_with_clock(&spec, &sim.data, &cfg, &clock);
        let fit = match result {
            Ok(f) if f.objective.is_finite() => f,
            Ok(f) => {
                rec.error = Some(format!("non-finite objective {}", f.objective));
                out.push(rec);
                continue;
            }
            Err(e) => {
                rec.error = Some(e.to_string());
                out.push(rec);
                continue;
            }
        };
        rec.failed = false;
        rec.time_s = fit.wall_time_s;
        rec.converged = fit.converged;
        rec.objective = Some(fit.objective);
        for j in 0..point.m {
            rec.intercept_errors.push(fit.params.beta0[j] - truth.beta0[j]);
            for c in 0..config.q {
                rec.slopes.push(fit.params.b[(j, c)]);
                rec.slope_errors.push(fit.params.b[(j, c)] - truth.b[(j, c)]);
            }
        }
        rec.procrustes_scores = procrustes_error(&sim.scores, &fit.varparams.a).ok();
        rec.procrustes_loadings = procrustes_error(&truth.gamma, &fit.params.gamma).ok();
        if config.inference {
            match observed_information(&fit, &spec, &sim.data) {
                Ok(info) => {
                    rec.information_notes = info.notes.len();
                    if let Ok(report) = wald(&fit, &spec, &info, Z_95) {
                        for j in 0..point.m {
                            for c in 0..config.q {
                                let (lo, hi, se) =
                                    (report.ci_lower.b[(j, c)], report.ci_upper.b[(j, c)], report.se.b[(j, c)]);
                                let t = truth.b[(j, c)];
                                rec.slope_covered.push(se.is_finite().then_some(lo <= t && t <= hi));
                            }
                        }
                    }
                    if let Ok(c) = cmsep(&fit, &spec, &sim.data, &info) {
                        rec.cmsep_violations = (0..point.n)
                            .filter(|&i| c.matrices[i].trace() < fit.varparams.covariance(i).trace())
                            .count();
                    }
                }
                Err(e) => rec.error = Some(format!("information: {e}")),
            }
        }
        out.push(rec);
    }
    Ok(out)
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, count) = values.into_iter().fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

/// Bias and RMSE per coefficient over replicates, then averaged over
/// coefficients.
fn bias_rmse(errors: &[&Vec<f64>]) -> (f64, f64) {
    let k = errors.first().map_or(0, |e| e.len());
    if errors.is_empty() || k == 0 {
        return (f64::NAN, f64::NAN);
    }
    let bias = mean((0..k).map(|c| mean(errors.iter().map(|e| e[c]))));
    let rmse = mean((0..k).map(|c| mean(errors.iter().map(|e| e[c] * e[c])).sqrt()));
    (bias, rmse)
}

fn summarize(method: Method, point: GridPoint, recs: &[&ReplicateRecord]) -> StudyRow {
    let ok: Vec<&ReplicateRecord> = recs.iter().copied().filter(|r| !r.failed).collect();
    let (slope_bias, slope_rmse) = bias_rmse(&ok.iter().map(|r| &r.slope_errors).collect::<Vec<_>>());
    let (intercept_bias, intercept_rmse) = bias_rmse(&ok.iter().map(|r| &r.intercept_errors).collect::<Vec<_>>());
    let covered: Vec<bool> = ok.iter().flat_map(|r| r.slope_covered.iter().flatten().copied()).collect();
    StudyRow {
        method,
        n: point.n,
        m: point.m,
        fits: recs.len(),
        failures: recs.len() - ok.len(),
        nonconverged: ok.iter().filter(|r| !r.converged).count(),
        slope_bias,
        slope_rmse,
        intercept_bias,
        intercept_rmse,
        slope_coverage: mean(covered.iter().map(|&c| if c { 1.0 } else { 0.0 })),
        coverage_intervals: covered.len(),
        procrustes_scores: mean(ok.iter().filter_map(|r| r.procrustes_scores)),
        procrustes_loadings: mean(ok.iter().filter_map(|r| r.procrustes_loadings)),
        cmsep_violations: ok.iter().map(|r| r.cmsep_violations).sum(),
        information_notes: ok.iter().map(|r| r.information_notes).sum(),
        mean_time_s: mean(ok.iter().map(|r| r.time_s)),
    }
}

fn compare(
    methods: &[Method],
    a: usize,
    b: usize,
    point: GridPoint,
    at: &[&ReplicateRecord],
    rows: &[StudyRow],
) -> PairRow {
    let (ma, mb) = (methods[a], methods[b]);
    let mut diffs = Vec::new();
    let mut datasets = 0;
    for ra in at.iter().filter(|r| r.method == ma && !r.failed) {
        if let Some(rb) = at.iter().find(|r| r.method == mb && r.replicate == ra.replicate && !r.failed) {
            datasets += 1;
            diffs.extend(ra.slopes.iter().zip(&rb.slopes).map(|(x, y)| (x - y).abs()));
        }
    }
    PairRow {
        method_a: ma,
        method_b: mb,
        n: point.n,
        m: point.m,
        datasets,
        mean_abs_slope_difference: mean(diffs),
        common_rmse: 0.5 * (rows[a].slope_rmse + rows[b].slope_rmse),
    }
}

impl StudyReport {
    pub fn row(&self, method: Method, point: GridPoint) -> Option<&StudyRow> {
        self.rows.iter().find(|r| r.method == method && r.n == point.n && r.m == point.m)
    }

    pub const CSV_COLUMNS: [&'static str; 16] = [
        "method",
        "n",
        "m",
        "fits",
        "failures",
        "nonconverged",
        "slope_bias",
        "slope_rmse",
        "intercept_bias",
        "intercept_rmse",
        "slope_coverage",
        "coverage_intervals",
        "procrustes_scores",
        "procrustes_loadings",
        "cmsep_violations",
        "information_notes",
    ];

    /// One row per method and grid point; no timing, so reruns match.
    pub fn to_csv(&self) -> Vec<u8> {
        let columns: Vec<String> = Self::CSV_COLUMNS.iter().map(|s| s.to_string()).collect();
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.method.to_string(),
                    r.n.to_string(),
                    r.m.to_string(),
                    r.fits.to_string(),
                    r.failures.to_string(),
                    r.nonconverged.to_string(),
                    fmt_f64(r.slope_bias),
                    fmt_f64(r.slope_rmse),
                    fmt_f64(r.intercept_bias),
                    fmt_f64(r.intercept_rmse),
                    fmt_f64(r.slope_coverage),
                    r.coverage_intervals.to_string(),
                    fmt_f64(r.procrustes_scores),
                    fmt_f64(r.procrustes_loadings),
                    r.cmsep_violations.to_string(),
                    r.information_notes.to_string(),
                ]
            })
            .collect();
        io::table_csv(&columns, &rows)
    }

    /// Mean fit time per method and grid point.
    pub fn timing_csv(&self) -> Vec<u8> {
        let columns: Vec<String> = ["method", "n", "m", "mean_time_s"].iter().map(|s| s.to_string()).collect();
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| vec![r.method.to_string(), r.n.to_string(), r.m.to_string(), fmt_f64(r.mean_time_s)])
            .collect();
        io::table_csv(&columns, &rows)
    }
}
