//! CSV matrices and JSON forms of parameter containers.

use std::fs;
use std::io::Write;
use std::path::Path;

use eva_gllvm_core::{
    CovStructure, Family, FitConfig, FitResult, InferenceReport, Method, ModelSpec, Parameters, StopReason,
    VariationalParams,
};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Input errors carrying the file and line where they occurred.
#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("{path}, line {line}: {message}")]
    Csv { path: String, line: u64, message: String },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

/// A numeric table with named columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub values: DMatrix<f64>,
}

impl Table {
    /// Keeps the columns whose count of nonzero entries is at least `min`.
    /// Returns the names of the dropped columns.
    pub fn filter_min_occurrences(&mut self, min: usize) -> Vec<String> {
        let keep: Vec<usize> = (0..self.values.ncols())
            .filter(|&j| self.values.column(j).iter().filter(|v| **v != 0.0).count() >= min)
            .collect();
        let dropped = (0..self.values.ncols())
            .filter(|j| !keep.contains(j))
            .map(|j| self.columns[j].clone())
            .collect();
        self.values = self.values.select_columns(&keep);
        self.columns = keep.iter().map(|&j| self.columns[j].clone()).collect();
        dropped
    }
}

/// Reads a header row followed by one numeric row per unit.
pub fn read_table(path: &Path) -> Result<Table, IoError> {
    let text = fs::read_to_string(path).map_err(|source| IoError::Read {
        path: path.display().to_string(),
        source,
    })?;
    parse_table(&text, &path.display().to_string())
}

pub fn parse_table(text: &str, name: &str) -> Result<Table, IoError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let csv_err = |e: csv::Error| {
        let line = e.position().map(|p| p.line()).unwrap_or(0);
        let message = match e.kind() {
            csv::ErrorKind::UnequalLengths { expected_len, len, .. } => {
                format!("expected {expected_len} fields, found {len}")
            }
            _ => e.to_string(),
        };
        IoError::Csv {
            path: name.to_string(),
            line,
            message,
        }
    };
    let columns: Vec<String> = reader.headers().map_err(csv_err)?.iter().map(|h| h.trim().to_string()).collect();
    if columns.is_empty() || columns.iter().all(|c| c.is_empty()) {
        return Err(IoError::Format {
            path: name.to_string(),
            message: "missing header row".into(),
        });
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        for (c, field) in record.iter().enumerate() {
            let field = field.trim();
            let value: f64 = field.parse().map_err(|_| IoError::Csv {
                path: name.to_string(),
                line,
                message: if field.is_empty() || field.eq_ignore_ascii_case("na") {
                    format!("missing value in column '{}'; missing data is not supported", columns[c])
                } else {
                    format!("cannot parse '{field}' in column '{}' as a number", columns[c])
                },
            })?;
            if !value.is_finite() {
                return Err(IoError::Csv {
                    path: name.to_string(),
                    line,
                    message: format!("non-finite value '{field}' in column '{}'", columns[c]),
                });
            }
            data.push(value);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(IoError::Format {
            path: name.to_string(),
            message: "no data rows".into(),
        });
    }
    Ok(Table {
        values: DMatrix::from_row_slice(rows, columns.len(), &data),
        columns,
    })
}

/// Renders a table as CSV with a header row.
pub fn table_csv(columns: &[String], rows: &[Vec<String>]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new());
    w.write_record(columns).expect("in-memory write");
    for row in rows {
        w.write_record(row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory write")
}

/// Renders a numeric matrix under the given column names.
pub fn matrix_csv(columns: &[String], values: &DMatrix<f64>) -> Vec<u8> {
    let rows: Vec<Vec<String>> = values
        .row_iter()
        .map(|r| r.iter().map(|v| fmt_f64(*v)).collect())
        .collect();
    table_csv(columns, &rows)
}

/// Shortest representation that parses back to the same value.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{v:?}")
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("serializable");
    out.push(b'\n');
    out
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(name: &str, rows: &[Vec<f64>], ncols: usize) -> Result<DMatrix<f64>, String> {
    if let Some(bad) = rows.iter().position(|r| r.len() != ncols) {
        return Err(format!("{name}: row {bad} has {} entries, expected {ncols}", rows[bad].len()));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
}

fn width(rows: &[Vec<f64>]) -> usize {
    rows.first().map_or(0, Vec::len)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParametersJson {
    pub beta0: Vec<f64>,
    /// m rows of q slopes.
    pub b: Vec<Vec<f64>>,
    /// m rows of p loadings.
    pub gamma: Vec<Vec<f64>>,
    pub phi: Option<Vec<f64>>,
    pub alpha: Option<Vec<f64>>,
    pub nu: Option<f64>,
}

impl From<&Parameters> for ParametersJson {
    fn from(p: &Parameters) -> Self {
        ParametersJson {
            beta0: p.beta0.iter().copied().collect(),
            b: rows(&p.b),
            gamma: rows(&p.gamma),
            phi: p.phi.as_ref().map(|v| v.iter().copied().collect()),
            alpha: p.alpha.as_ref().map(|v| v.iter().copied().collect()),
            nu: p.nu,
        }
    }
}

impl ParametersJson {
    /// Rebuilds parameters; `q` and `p` fix the widths when there are no rows.
    pub fn to_parameters(&self, q: usize, p: usize) -> Result<Parameters, String> {
        let m = self.beta0.len();
        for (name, len) in [("b", self.b.len()), ("gamma", self.gamma.len())] {
            if len != m {
                return Err(format!("{name} has {len} rows, expected {m}"));
            }
        }
        Ok(Parameters {
            beta0: DVector::from_vec(self.beta0.clone()),
            b: from_rows("b", &self.b, if m == 0 { q } else { width(&self.b) })?,
            gamma: from_rows("gamma", &self.gamma, if m == 0 { p } else { width(&self.gamma) })?,
            phi: self.phi.clone().map(DVector::from_vec),
            alpha: self.alpha.clone().map(DVector::from_vec),
            nu: self.nu,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariationalJson {
    /// n rows of p means.
    pub a: Vec<Vec<f64>>,
    /// Lower-triangular factors `L_i`, each p rows of p entries.
    pub chol: Vec<Vec<Vec<f64>>>,
}

impl From<&VariationalParams> for VariationalJson {
    fn from(v: &VariationalParams) -> Self {
        VariationalJson {
            a: rows(&v.a),
            chol: v.chol.iter().map(rows).collect(),
        }
    }
}

impl VariationalJson {
    pub fn to_variational(&self, p: usize) -> Result<VariationalParams, String> {
        Ok(VariationalParams {
            a: from_rows("a", &self.a, if self.a.is_empty() { p } else { width(&self.a) })?,
            chol: self
                .chol
                .iter()
                .map(|l| from_rows("chol", l, if l.is_empty() { p } else { width(l) }))
                .collect::<Result<_, _>>()?,
        })
    }
}

/// Everything about a fit except its wall time, so that reruns are
/// byte-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitJson {
    pub family: Family,
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub q: usize,
    pub row_effects: bool,
    pub tweedie_power: Option<f64>,
    pub responses: Vec<String>,
    pub covariates: Vec<String>,
    pub method: Method,
    pub a_structure: CovStructure,
    pub objective: f64,
    pub converged: bool,
    pub stop_reason: StopReason,
    pub iterations: usize,
    pub evaluations: usize,
    pub grad_norm: f64,
    pub start_index: usize,
    pub warnings: Vec<String>,
    pub config: FitConfig,
    pub params: ParametersJson,
    pub varparams: VariationalJson,
}

impl FitJson {
    pub fn new(spec: &ModelSpec, fit: &FitResult, config: &FitConfig, responses: &[String], covariates: &[String]) -> Self {
        FitJson {
            family: spec.family,
            n: spec.n,
            m: spec.m,
            p: spec.p,
            q: spec.q,
            row_effects: spec.row_effects,
            tweedie_power: spec.tweedie_power,
            responses: responses.to_vec(),
            covariates: covariates.to_vec(),
            method: fit.method,
            a_structure: fit.structure,
            objective: fit.objective,
            converged: fit.converged,
            stop_reason: fit.stop_reason,
            iterations: fit.iterations,
            evaluations: fit.evaluations,
            grad_norm: fit.grad_norm,
            start_index: fit.start_index,
            warnings: fit.warnings.clone(),
            config: *config,
            params: (&fit.params).into(),
            varparams: (&fit.varparams).into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceJson {
    pub z: f64,
    /// Condition number of the observed information (null when infinite).
    pub info_condition: Option<f64>,
    pub notes: Vec<String>,
    pub se: ParametersJson,
    pub ci_lower: ParametersJson,
    pub ci_upper: ParametersJson,
    pub intervals: Vec<eva_gllvm_core::inference::WaldInterval>,
}

impl From<&InferenceReport> for InferenceJson {
    fn from(r: &InferenceReport) -> Self {
        InferenceJson {
            z: r.z,
            info_condition: r.info_condition.is_finite().then_some(r.info_condition),
            notes: r.notes.clone(),
            se: (&r.se).into(),
            ci_lower: (&r.ci_lower).into(),
            ci_upper: (&r.ci_upper).into(),
            intervals: r.intervals.clone(),
        }
    }
}

/// Reads a fit configuration from TOML or JSON, chosen by file extension.
pub fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(|source| IoError::Read {
        path: path.display().to_string(),
        source,
    })?;
    let format_err = |message: String| IoError::Format {
        path: path.display().to_string(),
        message,
    };
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::from_str(&text).map_err(|e| format_err(e.to_string())),
        Some("toml") => toml::from_str(&text).map_err(|e| format_err(e.to_string())),
        _ => Err(format_err("expected a .toml or .json file".into())),
    }
}
