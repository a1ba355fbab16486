//! Model specification, parameter containers, packing of the free
//! optimization vector and the linear predictor.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use libm::{exp, log};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Supported response distribution and link pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "gaussian-identity")]
    GaussianIdentity,
    #[serde(rename = "poisson-log")]
    PoissonLog,
    #[serde(rename = "negbinomial-log")]
    NegBinomialLog,
    #[serde(rename = "bernoulli-logit")]
    BernoulliLogit,
    #[serde(rename = "bernoulli-probit")]
    BernoulliProbit,
    #[serde(rename = "tweedie-log")]
    TweedieLog,
    #[serde(rename = "beta-logit")]
    BetaLogit,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::GaussianIdentity,
        Family::PoissonLog,
        Family::NegBinomialLog,
        Family::BernoulliLogit,
        Family::BernoulliProbit,
        Family::TweedieLog,
        Family::BetaLogit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::GaussianIdentity => "gaussian-identity",
            Family::PoissonLog => "poisson-log",
            Family::NegBinomialLog => "negbinomial-log",
            Family::BernoulliLogit => "bernoulli-logit",
            Family::BernoulliProbit => "bernoulli-probit",
            Family::TweedieLog => "tweedie-log",
            Family::BetaLogit => "beta-logit",
        }
    }

    /// Whether the family carries a per-response dispersion `phi_j`.
    pub fn has_dispersion(self) -> bool {
        matches!(
            self,
            Family::GaussianIdentity | Family::NegBinomialLog | Family::TweedieLog | Family::BetaLogit
        )
    }

    /// Whether a closed-form standard variational bound is implemented.
    pub fn has_closed_form_va(self) -> bool {
        matches!(self, Family::GaussianIdentity | Family::PoissonLog)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .iter()
            .copied()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown family '{s}'")))
    }
}

/// Structure of the per-unit variational covariance `A_i`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovStructure {
    #[default]
    Full,
    Diagonal,
}

pub const DEFAULT_TWEEDIE_POWER: f64 = 1.5;

/// Family and dimensions of a GLLVM.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub q: usize,
    pub row_effects: bool,
    pub tweedie_power: Option<f64>,
}

impl ModelSpec {
    pub fn new(family: Family, n: usize, m: usize, p: usize, q: usize) -> Result<Self> {
        let spec = ModelSpec {
            family,
            n,
            m,
            p,
            q,
            row_effects: false,
            tweedie_power: (family == Family::TweedieLog).then_some(DEFAULT_TWEEDIE_POWER),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_row_effects(mut self, row_effects: bool) -> Result<Self> {
        self.row_effects = row_effects;
        self.validate()?;
        Ok(self)
    }

    pub fn with_tweedie_power(mut self, nu: f64) -> Result<Self> {
        self.tweedie_power = Some(nu);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.p == 0 {
            return Err(Error::InvalidSpec(format!(
                "n, m and p must be positive (n = {}, m = {}, p = {})",
                self.n, self.m, self.p
            )));
        }
        if self.p > self.m {
            return Err(Error::InvalidSpec(format!(
                "p = {} latent variables exceeds m = {} responses",
                self.p, self.m
            )));
        }
        match (self.family, self.tweedie_power) {
            (Family::TweedieLog, Some(nu)) if nu > 1.0 && nu < 2.0 => Ok(()),
            (Family::TweedieLog, Some(nu)) => Err(Error::InvalidSpec(format!(
                "Tweedie power must lie in (1, 2), got {nu}"
            ))),
            (Family::TweedieLog, None) => Err(Error::InvalidSpec("tweedie-log requires a power parameter".into())),
            (_, Some(_)) => Err(Error::InvalidSpec(format!(
                "power parameter given for non-Tweedie family {}",
                self.family
            ))),
            (_, None) => Ok(()),
        }
    }

    /// Tweedie power, or 0 for other families.
    pub fn nu(&self) -> f64 {
        self.tweedie_power.unwrap_or(0.0)
    }
}

/// Response matrix `y` (n x m) and covariate matrix `x` (n x q).
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseData {
    pub y: DMatrix<f64>,
    pub x: DMatrix<f64>,
}

impl ResponseData {
    pub fn new(y: DMatrix<f64>, x: DMatrix<f64>) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::DimensionMismatch {
                matrix: "X",
                expected_rows: y.nrows(),
                expected_cols: x.ncols(),
                found_rows: x.nrows(),
                found_cols: x.ncols(),
            });
        }
        check_finite("Y", &y)?;
        check_finite("X", &x)?;
        Ok(ResponseData { y, x })
    }

    /// Data without covariates.
    pub fn without_covariates(y: DMatrix<f64>) -> Result<Self> {
        let n = y.nrows();
        Self::new(y, DMatrix::zeros(n, 0))
    }

    /// Checks dimensions against `spec` and that every response lies in the
    /// family's support.
    pub fn validate_for(&self, spec: &ModelSpec) -> Result<()> {
        expect_shape("Y", &self.y, spec.n, spec.m)?;
        expect_shape("X", &self.x, spec.n, spec.q)?;
        for y in self.y.iter().copied() {
            check_support(spec.family, y)?;
        }
        Ok(())
    }
}

fn check_finite(matrix: &'static str, a: &DMatrix<f64>) -> Result<()> {
    for c in 0..a.ncols() {
        for r in 0..a.nrows() {
            if !a[(r, c)].is_finite() {
                return Err(Error::MissingData { matrix, row: r, col: c });
            }
        }
    }
    Ok(())
}

pub(crate) fn expect_shape(matrix: &'static str, a: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if a.nrows() != rows || a.ncols() != cols {
        return Err(Error::DimensionMismatch {
            matrix,
            expected_rows: rows,
            expected_cols: cols,
            found_rows: a.nrows(),
            found_cols: a.ncols(),
        });
    }
    Ok(())
}

/// Checks that `y` lies in the support of `family`.
pub fn check_support(family: Family, y: f64) -> Result<()> {
    let reason = match family {
        Family::GaussianIdentity if !y.is_finite() => Some("must be finite"),
        Family::PoissonLog | Family::NegBinomialLog if !(y >= 0.0 && y == libm::floor(y) && y.is_finite()) => {
            Some("counts must be non-negative integers")
        }
        Family::BernoulliLogit | Family::BernoulliProbit if y != 0.0 && y != 1.0 => Some("must be 0 or 1"),
        Family::TweedieLog if !(y >= 0.0 && y.is_finite()) => Some("must be non-negative"),
        Family::BetaLogit if !(y > 0.0 && y < 1.0) => Some("proportions must lie strictly inside (0, 1)"),
        _ => None,
    };
    match reason {
        Some(reason) => Err(Error::Domain { family, y, reason }),
        None => Ok(()),
    }
}

/// All model parameters.
///
/// The same container is reused for standard errors and interval bounds in
/// inference reports, where the positivity invariants do not apply.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    /// Intercepts, length m.
    pub beta0: DVector<f64>,
    /// Slopes, m x q (row j is beta_j).
    pub b: DMatrix<f64>,
    /// Loadings, m x p, lower triangular with positive diagonal.
    pub gamma: DMatrix<f64>,
    /// Dispersions, length m; `None` for Poisson and Bernoulli.
    pub phi: Option<DVector<f64>>,
    /// Fixed row effects, length n with `alpha[0] == 0`.
    pub alpha: Option<DVector<f64>>,
    /// Tweedie power (fixed, mirrors the spec).
    pub nu: Option<f64>,
}

impl Parameters {
    /// All-zero parameters except unit loadings diagonal and unit dispersions.
    pub fn neutral(spec: &ModelSpec) -> Self {
        let mut gamma = DMatrix::zeros(spec.m, spec.p);
        for k in 0..spec.p {
            gamma[(k, k)] = 1.0;
        }
        Parameters {
            beta0: DVector::zeros(spec.m),
            b: DMatrix::zeros(spec.m, spec.q),
            gamma,
            phi: spec.family.has_dispersion().then(|| DVector::from_element(spec.m, 1.0)),
            alpha: spec.row_effects.then(|| DVector::zeros(spec.n)),
            nu: spec.tweedie_power,
        }
    }

    /// Loading vector `lambda_j` (row j of Gamma).
    pub fn lambda(&self, j: usize) -> DVector<f64> {
        self.gamma.row(j).transpose()
    }

    pub fn phi_j(&self, j: usize) -> f64 {
        self.phi.as_ref().map_or(1.0, |phi| phi[j])
    }

    /// Verifies shapes and the identifiability constraints.
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.beta0.len() != spec.m {
            return Err(Error::DimensionMismatch {
                matrix: "beta0",
                expected_rows: spec.m,
                expected_cols: 1,
                found_rows: self.beta0.len(),
                found_cols: 1,
            });
        }
        expect_shape("B", &self.b, spec.m, spec.q)?;
        expect_shape("Gamma", &self.gamma, spec.m, spec.p)?;
        for k in 0..spec.p {
            for j in 0..k {
                if self.gamma[(j, k)] != 0.0 {
                    return Err(Error::InvalidParameter {
                        name: "Gamma (upper triangle)",
                        value: self.gamma[(j, k)],
                        reason: "entries above the diagonal must be zero",
                    });
                }
            }
            if !(self.gamma[(k, k)] > 0.0) {
                return Err(Error::InvalidParameter {
                    name: "Gamma (diagonal)",
                    value: self.gamma[(k, k)],
                    reason: "diagonal loadings must be positive",
                });
            }
        }
        match (&self.phi, spec.family.has_dispersion()) {
            (Some(phi), true) => {
                if phi.len() != spec.m {
                    return Err(Error::DimensionMismatch {
                        matrix: "phi",
                        expected_rows: spec.m,
                        expected_cols: 1,
                        found_rows: phi.len(),
                        found_cols: 1,
                    });
                }
                if let Some(&bad) = phi.iter().find(|v| !(**v > 0.0)) {
                    return Err(Error::InvalidParameter {
                        name: "phi",
                        value: bad,
                        reason: "dispersions must be positive",
                    });
                }
            }
            (None, false) => {}
            (Some(_), false) => return Err(Error::InvalidSpec(format!("{} has no dispersion", spec.family))),
            (None, true) => return Err(Error::InvalidSpec(format!("{} requires dispersions", spec.family))),
        }
        match (&self.alpha, spec.row_effects) {
            (Some(alpha), true) => {
                if alpha.len() != spec.n {
                    return Err(Error::DimensionMismatch {
                        matrix: "alpha",
                        expected_rows: spec.n,
                        expected_cols: 1,
                        found_rows: alpha.len(),
                        found_cols: 1,
                    });
                }
                if alpha[0] != 0.0 {
                    return Err(Error::InvalidParameter {
                        name: "alpha[0]",
                        value: alpha[0],
                        reason: "the first row effect is the reference level and must be zero",
                    });
                }
            }
            (None, false) => {}
            _ => return Err(Error::InvalidSpec("row effects do not match the specification".into())),
        }
        Ok(())
    }
}

/// Per-unit variational means and Cholesky factors of the covariances.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalParams {
    /// Means, n x p (row i is a_i).
    pub a: DMatrix<f64>,
    /// Lower-triangular p x p factors with positive diagonal, `A_i = L_i L_i'`.
    pub chol: Vec<DMatrix<f64>>,
}

impl VariationalParams {
    /// `a_i = 0`, `A_i = scale * I`.
    pub fn isotropic(n: usize, p: usize, scale: f64) -> Self {
        let l = DMatrix::identity(p, p) * libm::sqrt(scale);
        VariationalParams {
            a: DMatrix::zeros(n, p),
            chol: vec![l; n],
        }
    }

    pub fn covariance(&self, i: usize) -> DMatrix<f64> {
        &self.chol[i] * self.chol[i].transpose()
    }

    pub fn mean(&self, i: usize) -> DVector<f64> {
        self.a.row(i).transpose()
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        expect_shape("a", &self.a, spec.n, spec.p)?;
        if self.chol.len() != spec.n {
            return Err(Error::InvalidSpec(format!(
                "expected {} Cholesky factors, found {}",
                spec.n,
                self.chol.len()
            )));
        }
        for l in &self.chol {
            expect_shape("L_i", l, spec.p, spec.p)?;
            for r in 0..spec.p {
                if !(l[(r, r)] > 0.0) {
                    return Err(Error::InvalidParameter {
                        name: "L_i (diagonal)",
                        value: l[(r, r)],
                        reason: "Cholesky diagonal must be positive",
                    });
                }
                for c in r + 1..spec.p {
                    if l[(r, c)] != 0.0 {
                        return Err(Error::InvalidParameter {
                            name: "L_i (upper triangle)",
                            value: l[(r, c)],
                            reason: "Cholesky factor must be lower triangular",
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Flat vector of free optimization variables laid out by [`Layout`].
#[derive(Clone, Debug, PartialEq)]
pub struct PackedVector(pub Vec<f64>);

impl PackedVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Offsets of every block in the packed vector:
///
/// `[beta0 | vec(B) | Gamma free entries (column-major, log diagonal) | log phi
///  | alpha_2..alpha_n | a (row-major) | per-unit Cholesky (row-major lower, log diagonal)]`
///
/// The variational blocks are absent for Laplace fits.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub q: usize,
    pub has_phi: bool,
    pub row_effects: bool,
    pub structure: Option<CovStructure>,
    pub off_b: usize,
    pub off_gamma: usize,
    pub off_phi: usize,
    pub off_alpha: usize,
    pub off_a: usize,
    pub off_chol: usize,
    /// Entries per unit Cholesky block.
    pub chol_len: usize,
    /// Length of the model-parameter block.
    pub psi_len: usize,
    pub len: usize,
}

impl Layout {
    /// Layout with model and variational parameters.
    pub fn new(spec: &ModelSpec, structure: CovStructure) -> Self {
        Self::build(spec, Some(structure))
    }

    /// Layout with model parameters only.
    pub fn psi_only(spec: &ModelSpec) -> Self {
        Self::build(spec, None)
    }

    fn build(spec: &ModelSpec, structure: Option<CovStructure>) -> Self {
        let (n, m, p, q) = (spec.n, spec.m, spec.p, spec.q);
        let has_phi = spec.family.has_dispersion();
        let off_b = m;
        let off_gamma = off_b + m * q;
        let n_gamma = p * m - p * (p - 1) / 2;
        let off_phi = off_gamma + n_gamma;
        let off_alpha = off_phi + if has_phi { m } else { 0 };
        let psi_len = off_alpha + if spec.row_effects { n - 1 } else { 0 };
        let chol_len = match structure {
            Some(CovStructure::Full) => p * (p + 1) / 2,
            Some(CovStructure::Diagonal) => p,
            None => 0,
        };
        let off_a = psi_len;
        let off_chol = off_a + if structure.is_some() { n * p } else { 0 };
        let len = off_chol + n * chol_len;
        Layout {
            n,
            m,
            p,
            q,
            has_phi,
            row_effects: spec.row_effects,
            structure,
            off_b,
            off_gamma,
            off_phi,
            off_alpha,
            off_a,
            off_chol,
            chol_len,
            psi_len,
            len,
        }
    }

    /// Index of free loading `Gamma[j, k]` (requires `j >= k`).
    pub fn gamma_index(&self, j: usize, k: usize) -> usize {
        debug_assert!(j >= k);
        // columns before k hold (m - c) entries each
        let before: usize = k * self.m - k * (k.saturating_sub(1)) / 2;
        self.off_gamma + before + (j - k)
    }

    /// Index of the Cholesky entry `(r, c)` of unit `i` (`c <= r`).
    pub fn chol_index(&self, i: usize, r: usize, c: usize) -> usize {
        debug_assert!(c <= r);
        let within = match self.structure {
            Some(CovStructure::Diagonal) => {
                debug_assert_eq!(r, c);
                r
            }
            _ => r * (r + 1) / 2 + c,
        };
        self.off_chol + i * self.chol_len + within
    }

    /// Packed indices of the variational block of unit `i`: `a_i` then `L_i`.
    pub fn xi_indices(&self, i: usize) -> Vec<usize> {
        if self.structure.is_none() {
            return Vec::new();
        }
        let mut idx: Vec<usize> = (0..self.p).map(|k| self.off_a + i * self.p + k).collect();
        idx.extend((0..self.chol_len).map(|t| self.off_chol + i * self.chol_len + t));
        idx
    }

    pub fn xi_len(&self) -> usize {
        if self.structure.is_some() {
            self.p + self.chol_len
        } else {
            0
        }
    }

    /// Cholesky entries `(r, c)` in packing order for one unit.
    pub fn chol_entries(&self) -> Vec<(usize, usize)> {
        match self.structure {
            Some(CovStructure::Full) => (0..self.p).flat_map(|r| (0..=r).map(move |c| (r, c))).collect(),
            Some(CovStructure::Diagonal) => (0..self.p).map(|r| (r, r)).collect(),
            None => Vec::new(),
        }
    }

    fn check(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.len {
            return Err(Error::PackedLength {
                expected: self.len,
                found: theta.len(),
            });
        }
        if let Some(index) = theta.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinitePacked { index });
        }
        Ok(())
    }

    /// Decodes the model parameters from a packed vector.
    pub fn unpack_params(&self, theta: &[f64], spec: &ModelSpec) -> Result<Parameters> {
        if theta.len() < self.psi_len {
            return Err(Error::PackedLength {
                expected: self.len,
                found: theta.len(),
            });
        }
        if let Some(index) = theta[..self.psi_len].iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinitePacked { index });
        }
        Ok(self.params_unchecked(theta, spec))
    }

    pub(crate) fn params_unchecked(&self, theta: &[f64], spec: &ModelSpec) -> Parameters {
        let (m, q) = (self.m, self.q);
        let beta0 = DVector::from_column_slice(&theta[..m]);
        let b = DMatrix::from_column_slice(m, q, &theta[self.off_b..self.off_b + m * q]);
        Parameters {
            beta0,
            b,
            gamma: self.gamma_unchecked(theta),
            phi: self
                .has_phi
                .then(|| DVector::from_iterator(m, theta[self.off_phi..self.off_phi + m].iter().map(|v| exp(*v)))),
            alpha: self.row_effects.then(|| {
                let mut alpha = DVector::zeros(self.n);
                alpha.as_mut_slice()[1..].copy_from_slice(&theta[self.off_alpha..self.off_alpha + self.n - 1]);
                alpha
            }),
            nu: spec.tweedie_power,
        }
    }

    pub(crate) fn gamma_unchecked(&self, theta: &[f64]) -> DMatrix<f64> {
        let mut gamma = DMatrix::zeros(self.m, self.p);
        for k in 0..self.p {
            for j in k..self.m {
                let v = theta[self.gamma_index(j, k)];
                gamma[(j, k)] = if j == k { exp(v) } else { v };
            }
        }
        gamma
    }

    /// Cholesky factor of unit `i`.
    pub(crate) fn chol_unchecked(&self, theta: &[f64], i: usize) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.p, self.p);
        for (r, c) in self.chol_entries() {
            let v = theta[self.chol_index(i, r, c)];
            l[(r, c)] = if r == c { exp(v) } else { v };
        }
        l
    }

    /// Decodes the full packed vector.
    pub fn unpack(&self, theta: &[f64], spec: &ModelSpec) -> Result<(Parameters, VariationalParams)> {
        self.check(theta)?;
        let params = self.params_unchecked(theta, spec);
        let var = match self.structure {
            Some(_) => VariationalParams {
                a: DMatrix::from_row_slice(self.n, self.p, &theta[self.off_a..self.off_a + self.n * self.p]),
                chol: (0..self.n).map(|i| self.chol_unchecked(theta, i)).collect(),
            },
            None => VariationalParams::isotropic(self.n, self.p, 1.0),
        };
        Ok((params, var))
    }

    /// Encodes model parameters into the leading block of a packed vector.
    pub fn pack_params(&self, params: &Parameters, out: &mut [f64]) -> Result<()> {
        let (m, q) = (self.m, self.q);
        out[..m].copy_from_slice(params.beta0.as_slice());
        out[self.off_b..self.off_b + m * q].copy_from_slice(params.b.as_slice());
        for k in 0..self.p {
            for j in k..self.m {
                let v = params.gamma[(j, k)];
                out[self.gamma_index(j, k)] = if j == k { log(v) } else { v };
            }
        }
        if let Some(phi) = &params.phi {
            for j in 0..m {
                out[self.off_phi + j] = log(phi[j]);
            }
        }
        if let Some(alpha) = &params.alpha {
            out[self.off_alpha..self.off_alpha + self.n - 1].copy_from_slice(&alpha.as_slice()[1..]);
        }
        Ok(())
    }

    /// Encodes parameters and variational parameters.
    pub fn pack(&self, spec: &ModelSpec, params: &Parameters, var: Option<&VariationalParams>) -> Result<PackedVector> {
        params.validate(spec)?;
        let mut out = vec![0.0; self.len];
        self.pack_params(params, &mut out)?;
        if self.structure.is_some() {
            let var = var.ok_or_else(|| Error::InvalidSpec("layout requires variational parameters".into()))?;
            var.validate(spec)?;
            for i in 0..self.n {
                for k in 0..self.p {
                    out[self.off_a + i * self.p + k] = var.a[(i, k)];
                }
                for (r, c) in self.chol_entries() {
                    let v = var.chol[i][(r, c)];
                    out[self.chol_index(i, r, c)] = if r == c { log(v) } else { v };
                }
                if self.structure == Some(CovStructure::Diagonal) {
                    for r in 0..self.p {
                        for c in 0..r {
                            if var.chol[i][(r, c)] != 0.0 {
                                return Err(Error::InvalidParameter {
                                    name: "L_i (off-diagonal)",
                                    value: var.chol[i][(r, c)],
                                    reason: "diagonal covariance structure requires diagonal factors",
                                });
                            }
                        }
                    }
                }
            }
        }
        if let Some(index) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinitePacked { index });
        }
        Ok(PackedVector(out))
    }
}

/// Packs `(params, var)` with the full-covariance layout.
pub fn pack(spec: &ModelSpec, params: &Parameters, var: &VariationalParams, structure: CovStructure) -> Result<PackedVector> {
    Layout::new(spec, structure).pack(spec, params, Some(var))
}

/// Inverse of [`pack`].
pub fn unpack(theta: &[f64], spec: &ModelSpec, structure: CovStructure) -> Result<(Parameters, VariationalParams)> {
    Layout::new(spec, structure).unpack(theta, spec)
}

/// Offsets `alpha_i + beta0_j + x_i' beta_j` (n x m).
pub(crate) fn offsets(params: &Parameters, x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, m) = (x.nrows(), params.beta0.len());
    let mut out = DMatrix::zeros(n, m);
    for j in 0..m {
        for i in 0..n {
            let mut eta = params.beta0[j];
            for c in 0..x.ncols() {
                eta += x[(i, c)] * params.b[(j, c)];
            }
            if let Some(alpha) = &params.alpha {
                eta += alpha[i];
            }
            out[(i, j)] = eta;
        }
    }
    out
}

/// Linear predictor evaluated at the variational means, n x m.
pub fn linear_predictor(spec: &ModelSpec, params: &Parameters, x: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    expect_shape("X", x, spec.n, spec.q)?;
    expect_shape("a", a, spec.n, spec.p)?;
    expect_shape("B", &params.b, spec.m, spec.q)?;
    expect_shape("Gamma", &params.gamma, spec.m, spec.p)?;
    if params.beta0.len() != spec.m {
        return Err(Error::DimensionMismatch {
            matrix: "beta0",
            expected_rows: spec.m,
            expected_cols: 1,
            found_rows: params.beta0.len(),
            found_cols: 1,
        });
    }
    if let Some(alpha) = &params.alpha {
        if alpha.len() != spec.n {
            return Err(Error::DimensionMismatch {
                matrix: "alpha",
                expected_rows: spec.n,
                expected_cols: 1,
                found_rows: alpha.len(),
                found_cols: 1,
            });
        }
    }
    Ok(offsets(params, x) + a * params.gamma.transpose())
}

/// Residual covariance on the linear-predictor scale, `Gamma Gamma'`.
pub fn residual_covariance(params: &Parameters) -> DMatrix<f64> {
    &params.gamma * params.gamma.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn spec(family: Family, row_effects: bool) -> ModelSpec {
        ModelSpec::new(family, 6, 4, 2, 2).unwrap().with_row_effects(row_effects).unwrap()
    }

    #[test]
    fn linear_predictor_hand_cases() {
        let s = ModelSpec::new(Family::PoissonLog, 1, 1, 1, 2).unwrap();
        let mut params = Parameters::neutral(&s);
        params.beta0[0] = 1.0;
        params.b[(0, 0)] = 0.5;
        params.b[(0, 1)] = -0.25;
        let x = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let eta = linear_predictor(&s, &params, &x, &DMatrix::zeros(1, 1)).unwrap();
        assert_eq!(eta[(0, 0)], 1.0);

        let s = ModelSpec::new(Family::PoissonLog, 1, 2, 2, 0).unwrap();
        let mut params = Parameters::neutral(&s);
        params.gamma = DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.7, 0.7]);
        params.gamma[(0, 1)] = 0.0;
        let a = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let eta = linear_predictor(&s, &params, &DMatrix::zeros(1, 0), &a).unwrap();
        assert_relative_eq!(eta[(0, 0)], 0.3, epsilon = 1e-15);
        assert_relative_eq!(eta[(0, 1)], 0.0, epsilon = 1e-15);

        // lambda = (0.3, 0.7) hand inner product
        let mut g = DMatrix::zeros(2, 2);
        g[(0, 0)] = 1.0;
        g[(1, 0)] = 0.3;
        g[(1, 1)] = 0.7;
        params.gamma = g;
        let eta = linear_predictor(&s, &params, &DMatrix::zeros(1, 0), &a).unwrap();
        assert_relative_eq!(eta[(0, 1)], -0.4, epsilon = 1e-15);
    }

    #[test]
    fn linear_predictor_dimension_error_names_matrix() {
        let s = ModelSpec::new(Family::PoissonLog, 3, 2, 1, 1).unwrap();
        let params = Parameters::neutral(&s);
        let err = linear_predictor(&s, &params, &DMatrix::zeros(2, 1), &DMatrix::zeros(3, 1)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { matrix: "X", .. }));
    }

    #[test]
    fn zero_vector_unpacks_to_identity_transform() {
        let s = spec(Family::NegBinomialLog, true);
        let layout = Layout::new(&s, CovStructure::Full);
        let (params, var) = layout.unpack(&vec![0.0; layout.len], &s).unwrap();
        for k in 0..s.p {
            assert_eq!(params.gamma[(k, k)], 1.0);
        }
        assert!(params.phi.unwrap().iter().all(|v| *v == 1.0));
        for i in 0..s.n {
            assert_eq!(var.covariance(i), DMatrix::identity(s.p, s.p));
        }
    }

    #[test]
    fn pack_unpack_round_trips() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for family in [Family::NegBinomialLog, Family::PoissonLog] {
            for structure in [CovStructure::Full, CovStructure::Diagonal] {
                let s = spec(family, true);
                let layout = Layout::new(&s, structure);
                for _ in 0..100 {
                    let t: Vec<f64> = (0..layout.len).map(|_| rng.gen_range(-2.0..2.0)).collect();
                    let (params, var) = layout.unpack(&t, &s).unwrap();
                    params.validate(&s).unwrap();
                    var.validate(&s).unwrap();
                    let back = layout.pack(&s, &params, Some(&var)).unwrap();
                    for (x, y) in back.as_slice().iter().zip(&t) {
                        assert_relative_eq!(*x, *y, epsilon = 1e-14);
                    }
                    let (p2, v2) = layout.unpack(back.as_slice(), &s).unwrap();
                    assert_relative_eq!(p2.gamma, params.gamma, epsilon = 1e-14);
                    assert_relative_eq!(v2.chol[3], var.chol[3], epsilon = 1e-14);
                }
            }
        }
    }

    #[test]
    fn unpack_rejects_bad_input() {
        let s = spec(Family::PoissonLog, false);
        let layout = Layout::new(&s, CovStructure::Full);
        assert!(matches!(layout.unpack(&[0.0; 3], &s), Err(Error::PackedLength { .. })));
        let mut t = vec![0.0; layout.len];
        t[5] = f64::NAN;
        assert_eq!(layout.unpack(&t, &s).unwrap_err(), Error::NonFinitePacked { index: 5 });
    }

    #[test]
    fn residual_covariance_cases() {
        let s = ModelSpec::new(Family::PoissonLog, 1, 2, 1, 0).unwrap();
        let mut params = Parameters::neutral(&s);
        params.gamma = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let sigma = residual_covariance(&params);
        assert_eq!(sigma, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));

        let s = ModelSpec::new(Family::PoissonLog, 1, 5, 3, 0).unwrap();
        assert_relative_eq!(residual_covariance(&Parameters::neutral(&s)).trace(), 3.0);

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let layout = Layout::psi_only(&s);
        for _ in 0..20 {
            let t: Vec<f64> = (0..layout.len).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let params = layout.unpack_params(&t, &s).unwrap();
            let eig = residual_covariance(&params).symmetric_eigen();
            assert!(eig.eigenvalues.iter().all(|v| *v >= -1e-12));
        }
    }

    #[test]
    fn support_checks() {
        assert!(check_support(Family::BetaLogit, 0.0).is_err());
        assert!(check_support(Family::BetaLogit, 0.5).is_ok());
        assert!(check_support(Family::PoissonLog, 1.5).is_err());
        assert!(check_support(Family::BernoulliLogit, 2.0).is_err());
        assert!(check_support(Family::TweedieLog, -0.1).is_err());
        assert!(ModelSpec::new(Family::TweedieLog, 2, 2, 1, 0).unwrap().with_tweedie_power(2.0).is_err());
        assert!(ModelSpec::new(Family::PoissonLog, 2, 2, 3, 0).is_err());
    }
}
