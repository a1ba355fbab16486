//! Command-line front end. Exit codes: 0 success, 1 replay mismatch,
//! 2 usage or data error, 3 non-convergence or numerical failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use eva_gllvm_core::inference::{param_refs, Z_95};
use eva_gllvm_core::{
    cmsep, dunn_smyth_residuals, fit_with_clock, observed_information, ordination, variance_explained, wald, Error,
    Family, FitConfig, FitResult, Layout, Method, ModelSpec, ResponseData,
};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::io::{self, fmt_f64, matrix_csv, read_table, table_csv, to_json_bytes, FitJson, InferenceJson, IoError};
use crate::manifest::{digest_file, read_manifest, OutputDir, RunManifest, MANIFEST_FILE};
use crate::study::{run_study, StudyConfig, StudyError, TruthSource};
use crate::{StdClock, VERSION};

pub const EXIT_OK: i32 = 0;
pub const EXIT_MISMATCH: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_FAILURE: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "eva-gllvm", version, about = "Fit generalized linear latent variable models")]
pub struct Cli {
    /// Worker threads for replicate studies (0 or unset: all cores; 1: serial).
    #[arg(long, global = true, env = "EVA_GLLVM_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit one method and export estimates, inference and diagnostics.
    Fit(FitArgs),
    /// Fit every applicable method to the same data side by side.
    Compare(DataArgs),
    /// Run a replicate simulation study.
    Simulate(SimulateArgs),
    /// Rerun a previous command from its manifest and compare outputs.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Response matrix, one unit per row, with a header row.
    #[arg(long)]
    pub y: PathBuf,
    /// Covariate matrix with a header row and the same number of rows as Y.
    #[arg(long)]
    pub x: Option<PathBuf>,
    #[arg(long)]
    pub family: Family,
    /// Number of latent variables.
    #[arg(long)]
    pub p: usize,
    /// Expected number of covariates; checked against X.
    #[arg(long)]
    pub q: Option<usize>,
    /// Fixed per-unit intercepts.
    #[arg(long)]
    pub row_effects: bool,
    #[arg(long)]
    pub tweedie_power: Option<f64>,
    /// Drop responses with fewer nonzero entries than this.
    #[arg(long)]
    pub min_occurrences: Option<usize>,
    /// Optimizer settings as TOML or JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for restarts and residual randomization.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// eva, va or laplace (default: the config file's, else eva).
    #[arg(long)]
    pub method: Option<Method>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Study configuration as TOML or JSON.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for the rerun (default: `replay` next to the manifest).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Resolved inputs of a data command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataRun {
    pub y: PathBuf,
    pub x: Option<PathBuf>,
    pub family: Family,
    pub p: usize,
    pub q: Option<usize>,
    pub row_effects: bool,
    pub tweedie_power: Option<f64>,
    pub min_occurrences: Option<usize>,
    pub fit: FitConfig,
}

/// A fully resolved command, as stored in manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Run {
    Fit(DataRun),
    Compare(DataRun),
    Simulate(StudyConfig),
}

impl Run {
    fn name(&self) -> &'static str {
        match self {
            Run::Fit(_) => "fit",
            Run::Compare(_) => "compare",
            Run::Simulate(_) => "simulate",
        }
    }

    fn seed(&self) -> u64 {
        match self {
            Run::Fit(d) | Run::Compare(d) => d.fit.seed,
            Run::Simulate(s) => s.seed,
        }
    }

    fn inputs(&self) -> Vec<&Path> {
        match self {
            Run::Fit(d) | Run::Compare(d) => std::iter::once(d.y.as_path()).chain(d.x.as_deref()).collect(),
            Run::Simulate(s) => match &s.truth {
                TruthSource::File { path } => vec![path.as_path()],
                TruthSource::Synthetic => Vec::new(),
            },
        }
    }
}

#[derive(Debug)]
pub struct Exit {
    pub code: i32,
    pub message: String,
}

impl Exit {
    fn usage(message: impl Into<String>) -> Self {
        Exit {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn failure(message: impl Into<String>) -> Self {
        Exit {
            code: EXIT_FAILURE,
            message: message.into(),
        }
    }
}

impl From<IoError> for Exit {
    fn from(e: IoError) -> Self {
        Exit::usage(e.to_string())
    }
}

impl From<std::io::Error> for Exit {
    fn from(e: std::io::Error) -> Self {
        Exit::usage(format!("cannot write output: {e}"))
    }
}

impl From<StudyError> for Exit {
    fn from(e: StudyError) -> Self {
        Exit::usage(e.to_string())
    }
}

/// Input and configuration problems exit with 2, numerical ones with 3.
fn core_exit(e: Error) -> Exit {
    match e {
        Error::InvalidSpec(_)
        | Error::DimensionMismatch { .. }
        | Error::Domain { .. }
        | Error::InvalidParameter { .. }
        | Error::MissingData { .. }
        | Error::NoClosedFormVa { .. }
        | Error::QuadratureDimension { .. }
        | Error::Config(_) => Exit::usage(e.to_string()),
        _ => Exit::failure(e.to_string()),
    }
}

/// Parses arguments, runs the command and returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Some(n) = cli.threads.filter(|&n| n > 0) {
        // A pool already built by an earlier call in the same process is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(exit) => {
            eprintln!("error: {}", exit.message);
            exit.code
        }
    }
}

fn dispatch(command: Command) -> Result<i32, Exit> {
    match command {
        Command::Fit(args) => {
            let mut run = resolve_data(&args.data)?;
            if let Some(method) = args.method {
                run.fit.method = method;
            }
            execute(&Run::Fit(run), &args.data.out).map(|(code, _)| code)
        }
        Command::Compare(args) => {
            let run = resolve_data(&args)?;
            execute(&Run::Compare(run), &args.out).map(|(code, _)| code)
        }
        Command::Simulate(args) => {
            let run = resolve_study(&args.config)?;
            execute(&Run::Simulate(run), &args.out).map(|(code, _)| code)
        }
        Command::Replay(args) => replay(&args),
    }
}

fn absolute(path: &Path) -> Result<PathBuf, Exit> {
    fs::canonicalize(path).map_err(|e| Exit::usage(format!("{}: {e}", path.display())))
}

fn resolve_data(args: &DataArgs) -> Result<DataRun, Exit> {
    let mut fit = match &args.config {
        Some(path) => io::read_config::<FitConfig>(path)?,
        None => FitConfig::default(),
    };
    if let Some(seed) = args.seed {
        fit.seed = seed;
    }
    Ok(DataRun {
        y: absolute(&args.y)?,
        x: args.x.as_deref().map(absolute).transpose()?,
        family: args.family,
        p: args.p,
        q: args.q,
        row_effects: args.row_effects,
        tweedie_power: args.tweedie_power,
        min_occurrences: args.min_occurrences,
        fit,
    })
}

fn resolve_study(path: &Path) -> Result<StudyConfig, Exit> {
    let mut config: StudyConfig = io::read_config(path)?;
    if let TruthSource::File { path: truth } = &config.truth {
        let base = path.parent().unwrap_or(Path::new("."));
        config.truth = TruthSource::File {
            path: absolute(&base.join(truth))?,
        };
    }
    config.validate()?;
    Ok(config)
}

/// Runs a resolved command into `out` and writes its manifest.
pub fn execute(run: &Run, out: &Path) -> Result<(i32, RunManifest), Exit> {
    let start = Instant::now();
    let inputs = run
        .inputs()
        .into_iter()
        .map(|p| digest_file(p).map_err(|e| Exit::usage(format!("{}: {e}", p.display()))))
        .collect::<Result<Vec<_>, _>>()?;
    let mut dir = OutputDir::create(out)?;
    let code = match run {
        Run::Fit(d) => run_fit(d, &mut dir)?,
        Run::Compare(d) => run_compare(d, &mut dir)?,
        Run::Simulate(s) => run_simulate(s, &mut dir)?,
    };
    let manifest = dir.finish(RunManifest {
        command: run.name().to_string(),
        config: serde_json::to_value(run).expect("serializable"),
        inputs,
        outputs: Vec::new(),
        seed: run.seed(),
        version: VERSION.to_string(),
        wall_time_s: start.elapsed().as_secs_f64(),
    })?;
    Ok((code, manifest))
}

struct Loaded {
    spec: ModelSpec,
    data: ResponseData,
    responses: Vec<String>,
    covariates: Vec<String>,
    dropped: Vec<String>,
}

fn load(run: &DataRun) -> Result<Loaded, Exit> {
    let mut y = read_table(&run.y)?;
    let dropped = run.min_occurrences.map(|k| y.filter_min_occurrences(k)).unwrap_or_default();
    if y.values.ncols() == 0 {
        return Err(Exit::usage("no responses left after filtering"));
    }
    let x = run.x.as_deref().map(read_table).transpose()?;
    match (run.q, &x) {
        (Some(q), None) if q > 0 => {
            return Err(Exit::usage(format!("q = {q} covariates expected but no covariate file (--x) given")));
        }
        (Some(q), Some(t)) if t.values.ncols() != q => {
            return Err(Exit::usage(format!(
                "q = {q} covariates expected, {} has {}",
                run.x.as_ref().expect("present").display(),
                t.values.ncols()
            )));
        }
        _ => {}
    }
    let n = y.values.nrows();
    let (x_values, covariates) = match x {
        Some(t) => {
            if t.values.nrows() != n {
                return Err(Exit::usage(format!(
                    "covariate file has {} rows, response file has {n}",
                    t.values.nrows()
                )));
            }
            (t.values, t.columns)
        }
        None => (DMatrix::zeros(n, 0), Vec::new()),
    };
    let mut spec = ModelSpec::new(run.family, n, y.values.ncols(), run.p, x_values.ncols())
        .and_then(|s| s.with_row_effects(run.row_effects))
        .map_err(core_exit)?;
    if let Some(nu) = run.tweedie_power {
        spec = spec.with_tweedie_power(nu).map_err(core_exit)?;
    }
    let data = ResponseData::new(y.values, x_values).map_err(core_exit)?;
    data.validate_for(&spec).map_err(core_exit)?;
    Ok(Loaded {
        spec,
        data,
        responses: y.columns,
        covariates,
        dropped,
    })
}

fn check_method(run: &DataRun) -> Result<(), Exit> {
    run.fit.validate().map_err(core_exit)?;
    run.fit.method.check_family(run.family).map_err(core_exit)
}

fn dropped_warnings(l: &Loaded, min: Option<usize>) -> Vec<String> {
    l.dropped
        .iter()
        .map(|c| format!("response '{c}' dropped: fewer than {} nonzero entries", min.unwrap_or(0)))
        .collect()
}

fn timed_fit(l: &Loaded, cfg: &FitConfig) -> Result<FitResult, Exit> {
    fit_with_clock(&l.spec, &l.data, cfg, &StdClock::new()).map_err(core_exit)
}

fn run_fit(run: &DataRun, dir: &mut OutputDir) -> Result<i32, Exit> {
    check_method(run)?;
    let l = load(run)?;
    let mut result = timed_fit(&l, &run.fit)?;
    let mut warnings = dropped_warnings(&l, run.min_occurrences);
    warnings.append(&mut result.warnings);
    result.warnings = warnings;
    let fail = |stage: &str, e: Error| Exit::failure(format!("{stage} failed: {e}"));
    let info = observed_information(&result, &l.spec, &l.data).map_err(|e| fail("observed information", e))?;
    let report = wald(&result, &l.spec, &info, Z_95).map_err(|e| fail("Wald intervals", e))?;
    let pred = cmsep(&result, &l.spec, &l.data, &info).map_err(|e| fail("prediction covariance", e))?;
    let ord = ordination(&result, &pred);
    let resid = dunn_smyth_residuals(&result, &l.spec, &l.data, run.fit.seed).map_err(|e| fail("residuals", e))?;

    let fit_json = FitJson::new(&l.spec, &result, &run.fit, &l.responses, &l.covariates);
    dir.write("fit.json", &to_json_bytes(&fit_json), true)?;
    let mut inference = InferenceJson::from(&report);
    inference.notes.extend(pred.notes.iter().cloned());
    dir.write("inference.json", &to_json_bytes(&inference), true)?;
    dir.write("ordination.csv", &ordination_csv(&ord.scores, &ord.loadings, &l.responses), true)?;
    dir.write("ellipses.csv", &ellipses_csv(&ord), true)?;
    dir.write("residuals.csv", &matrix_csv(&l.responses, &resid), true)?;

    println!(
        "{} fit: objective {} after {} iterations ({})",
        result.method,
        result.objective,
        result.iterations,
        if result.converged { "converged" } else { "not converged" }
    );
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    if result.converged {
        Ok(EXIT_OK)
    } else {
        eprintln!("error: optimizer stopped without converging ({:?})", result.stop_reason);
        Ok(EXIT_FAILURE)
    }
}

/// Columns: kind (`score` or `loading`), index, label, then one column per
/// latent dimension.
pub fn ordination_csv(scores: &DMatrix<f64>, loadings: &DMatrix<f64>, responses: &[String]) -> Vec<u8> {
    let p = scores.ncols();
    let mut columns: Vec<String> = vec!["kind".into(), "index".into(), "label".into()];
    columns.extend((1..=p).map(|k| format!("dim{k}")));
    let mut rows = Vec::new();
    for (kind, m, labels) in [("score", scores, None), ("loading", loadings, Some(responses))] {
        for r in 0..m.nrows() {
            let label = labels.map_or_else(|| format!("unit{}", r + 1), |l| l[r].clone());
            let mut row = vec![kind.to_string(), (r + 1).to_string(), label];
            row.extend(m.row(r).iter().map(|v| fmt_f64(*v)));
            rows.push(row);
        }
    }
    table_csv(&columns, &rows)
}

/// For p = 2: centre, covariance entries and radius of each 95% prediction
/// ellipse. Otherwise: 95% marginal prediction intervals per dimension.
pub fn ellipses_csv(ord: &eva_gllvm_core::OrdinationOutput) -> Vec<u8> {
    let strings = |v: Vec<&str>| v.into_iter().map(String::from).collect::<Vec<_>>();
    match ord.ellipses() {
        Some(ellipses) => {
            let columns = strings(vec!["unit", "center1", "center2", "cov11", "cov12", "cov22", "radius"]);
            let rows: Vec<Vec<String>> = ellipses
                .iter()
                .enumerate()
                .map(|(i, e)| {
                    let mut row = vec![(i + 1).to_string()];
                    row.extend(
                        [e.center[0], e.center[1], e.cov[0][0], e.cov[0][1], e.cov[1][1], e.radius].map(fmt_f64),
                    );
                    row
                })
                .collect();
            table_csv(&columns, &rows)
        }
        None => {
            let columns = strings(vec!["unit", "dim", "estimate", "lower", "upper"]);
            let mut rows = Vec::new();
            for (i, dims) in ord.marginal_intervals(Z_95).iter().enumerate() {
                for (k, (lo, hi)) in dims.iter().enumerate() {
                    rows.push(vec![
                        (i + 1).to_string(),
                        (k + 1).to_string(),
                        fmt_f64(ord.scores[(i, k)]),
                        fmt_f64(*lo),
                        fmt_f64(*hi),
                    ]);
                }
            }
            table_csv(&columns, &rows)
        }
    }
}

/// Methods compared for a family, in output order.
pub fn compare_methods(family: Family) -> Vec<Method> {
    let mut out = vec![Method::Eva];
    if family.has_closed_form_va() {
        out.push(Method::Va);
    }
    out.push(Method::Laplace);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodOutcome {
    pub method: Method,
    pub ok: bool,
    pub error: Option<String>,
    pub objective: Option<f64>,
    pub converged: Option<bool>,
    pub iterations: Option<usize>,
    /// Share of residual latent covariance trace explained by covariates.
    pub variance_explained: Option<f64>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareJson {
    pub family: Family,
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub q: usize,
    pub methods: Vec<MethodOutcome>,
}

fn run_compare(run: &DataRun, dir: &mut OutputDir) -> Result<i32, Exit> {
    run.fit.validate().map_err(core_exit)?;
    let l = load(run)?;
    let layout = Layout::psi_only(&l.spec);
    let names: Vec<String> = param_refs(&layout).into_iter().map(|r| r.name()).collect();
    let mut outcomes = Vec::new();
    let mut estimates: Vec<Option<Vec<f64>>> = Vec::new();
    let mut times = Vec::new();
    for method in compare_methods(l.spec.family) {
        let cfg = FitConfig { method, ..run.fit };
        let mut outcome = MethodOutcome {
            method,
            ok: false,
            error: None,
            objective: None,
            converged: None,
            iterations: None,
            variance_explained: None,
            warnings: Vec::new(),
        };
        match timed_fit(&l, &cfg) {
            Ok(result) if result.objective.is_finite() => {
                let mut psi = vec![0.0; layout.psi_len];
                layout.pack_params(&result.params, &mut psi).map_err(core_exit)?;
                outcome.ok = true;
                outcome.objective = Some(result.objective);
                outcome.converged = Some(result.converged);
                outcome.iterations = Some(result.iterations);
                outcome.warnings = result.warnings.clone();
                if l.spec.q > 0 {
                    outcome.variance_explained = null_fit(&l, &cfg)
                        .and_then(|null| variance_explained(&null.params, &result.params).map_err(|e| e.to_string()))
                        .map_err(|e| outcome.warnings.push(format!("variance explained unavailable: {e}")))
                        .ok();
                }
                estimates.push(Some(natural_scale(&layout, &psi)));
                times.push(Some(result.wall_time_s));
            }
            Ok(result) => {
                outcome.error = Some(format!("non-finite objective {}", result.objective));
                estimates.push(None);
                times.push(None);
            }
            Err(e) => {
                outcome.error = Some(e.message);
                estimates.push(None);
                times.push(None);
            }
        }
        outcomes.push(outcome);
    }

    let mut columns = vec!["parameter".to_string()];
    columns.extend(outcomes.iter().map(|o| o.method.to_string()));
    let rows: Vec<Vec<String>> = names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let mut row = vec![name.clone()];
            row.extend(estimates.iter().map(|e| e.as_ref().map_or(String::new(), |v| fmt_f64(v[k]))));
            row
        })
        .collect();
    dir.write("compare.csv", &table_csv(&columns, &rows), true)?;
    let summary = CompareJson {
        family: l.spec.family,
        n: l.spec.n,
        m: l.spec.m,
        p: l.spec.p,
        q: l.spec.q,
        methods: outcomes.clone(),
    };
    dir.write("compare.json", &to_json_bytes(&summary), true)?;
    let timing_rows: Vec<Vec<String>> = outcomes
        .iter()
        .zip(&times)
        .map(|(o, t)| vec![o.method.to_string(), t.map_or(String::new(), fmt_f64)])
        .collect();
    dir.write("timing.csv", &table_csv(&["method".into(), "time_s".into()], &timing_rows), false)?;

    for (o, t) in outcomes.iter().zip(&times) {
        match (&o.error, o.objective, t) {
            (None, Some(obj), Some(t)) => println!(
                "{}: objective {obj}, {:.3} s{}",
                o.method,
                t,
                if o.converged == Some(true) { "" } else { " (not converged)" }
            ),
            (err, _, _) => println!("{}: failed: {}", o.method, err.as_deref().unwrap_or("unknown")),
        }
    }
    if outcomes.iter().any(|o| o.ok) {
        Ok(EXIT_OK)
    } else {
        Err(Exit::failure("every method failed"))
    }
}

/// Packed estimates with log-scale entries mapped back.
fn natural_scale(layout: &Layout, psi: &[f64]) -> Vec<f64> {
    param_refs(layout)
        .into_iter()
        .zip(psi)
        .map(|(r, v)| if r.log_scale() { v.exp() } else { *v })
        .collect()
}

fn null_fit(l: &Loaded, cfg: &FitConfig) -> Result<FitResult, String> {
    let mut spec = l.spec.clone();
    spec.q = 0;
    let data = ResponseData::new(l.data.y.clone(), DMatrix::zeros(spec.n, 0)).map_err(|e| e.to_string())?;
    let r = eva_gllvm_core::fit(&spec, &data, cfg).map_err(|e| e.to_string())?;
    if r.objective.is_finite() {
        Ok(r)
    } else {
        Err("null model objective is not finite".into())
    }
}

fn run_simulate(config: &StudyConfig, dir: &mut OutputDir) -> Result<i32, Exit> {
    let report = run_study(config)?;
    dir.write("study.csv", &report.to_csv(), true)?;
    dir.write("study.json", &to_json_bytes(&report), true)?;
    dir.write("timing.csv", &report.timing_csv(), false)?;
    for r in &report.rows {
        println!(
            "{} n={} m={}: slope RMSE {}, coverage {}, failures {}/{}, mean time {:.3} s",
            r.method, r.n, r.m, r.slope_rmse, r.slope_coverage, r.failures, r.fits, r.mean_time_s
        );
    }
    Ok(EXIT_OK)
}

fn replay(args: &ReplayArgs) -> Result<i32, Exit> {
    let old = read_manifest(&args.manifest).map_err(Exit::usage)?;
    let run: Run = serde_json::from_value(old.config.clone())
        .map_err(|e| Exit::usage(format!("{}: unreadable command: {e}", args.manifest.display())))?;
    for input in &old.inputs {
        let now = digest_file(&input.path).map_err(|e| Exit::usage(format!("{}: {e}", input.path.display())))?;
        if now.sha256 != input.sha256 {
            return Err(Exit::usage(format!("input {} changed since the recorded run", input.path.display())));
        }
    }
    let out = match &args.out {
        Some(o) => o.clone(),
        None => args.manifest.parent().unwrap_or(Path::new(".")).join("replay"),
    };
    let (code, new) = execute(&run, &out)?;
    let mut mismatches = 0;
    for o in old.outputs.iter().filter(|o| o.deterministic) {
        match new.outputs.iter().find(|n| n.file == o.file) {
            Some(n) if n.sha256 == o.sha256 => println!("identical: {}", o.file),
            _ => {
                println!("differs: {}", o.file);
                mismatches += 1;
            }
        }
    }
    if mismatches > 0 {
        Err(Exit {
            code: EXIT_MISMATCH,
            message: format!("{mismatches} output(s) differ from {}", MANIFEST_FILE),
        })
    } else {
        Ok(code)
    }
}
