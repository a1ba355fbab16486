//! EVA, standard VA and Laplace objectives with analytic gradients over the
//! packed parameter vector.

use alloc::vec;
use alloc::vec::Vec;

use libm::{exp, fabs, log};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::{dispersion_trusted, eval_both, eval_kernel, eval_trusted, DispersionEval, FamilyEval};
use crate::linalg::spd_inverse_logdet;
use crate::model::{offsets, CovStructure, Family, Layout, ModelSpec, Parameters, ResponseData, VariationalParams};
use crate::special::{ln_gamma, pairwise_sum};

/// Approximation used for the marginal log-likelihood.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Eva,
    Va,
    Laplace,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Eva, Method::Va, Method::Laplace];

    pub fn name(self) -> &'static str {
        match self {
            Method::Eva => "eva",
            Method::Va => "va",
            Method::Laplace => "laplace",
        }
    }

    pub fn is_variational(self) -> bool {
        self != Method::Laplace
    }

    /// Errors if the method has no implementation for `family`.
    pub fn check_family(self, family: Family) -> Result<()> {
        if self == Method::Va && !family.has_closed_form_va() {
            return Err(Error::NoClosedFormVa { family });
        }
        Ok(())
    }
}

impl core::fmt::Display for Method {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

impl core::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(alloc::format!("unknown method '{s}'; expected one of eva, va, laplace")))
    }
}

/// Objective value with its per-unit contributions.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveValue {
    pub value: f64,
    pub per_unit: Vec<f64>,
}

impl ObjectiveValue {
    fn from_units(per_unit: Vec<f64>) -> Self {
        ObjectiveValue {
            value: pairwise_sum(&per_unit),
            per_unit,
        }
    }
}

/// Model parameters decoded once per evaluation.
pub(crate) struct Decoded {
    pub gamma: DMatrix<f64>,
    pub phi: Vec<f64>,
    /// `alpha_i + beta0_j + x_i' beta_j`, n x m.
    pub off: DMatrix<f64>,
}

/// Per-(i, j) term of a variational objective as a function of the linear
/// predictor `eta` and the variance `s = lambda' A lambda`.
#[derive(Clone, Copy, Debug, Default)]
struct Term {
    value: f64,
    d_eta: f64,
    d_s: f64,
    d_phi: f64,
}

/// A fitting problem: data, spec, packed layout and objective.
#[derive(Clone, Debug)]
pub struct Problem<'a> {
    pub spec: &'a ModelSpec,
    pub data: &'a ResponseData,
    pub layout: Layout,
    pub method: Method,
    nu: f64,
}

/// Warm starts for the per-unit Laplace modes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeCache {
    pub modes: Vec<DVector<f64>>,
}

impl ModeCache {
    pub fn new(n: usize, p: usize) -> Self {
        ModeCache {
            modes: vec![DVector::zeros(p); n],
        }
    }
}

/// Laplace mode of one unit.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitMode {
    pub mode: DVector<f64>,
    /// `(I - H)^{-1}` at the mode.
    pub covariance: DMatrix<f64>,
}

const INNER_TOL: f64 = 1e-8;
const INNER_MAX_ITER: usize = 100;
const INNER_MAX_HALVINGS: usize = 50;

impl<'a> Problem<'a> {
    /// `structure` is ignored for Laplace fits.
    pub fn new(spec: &'a ModelSpec, data: &'a ResponseData, method: Method, structure: CovStructure) -> Result<Self> {
        spec.validate()?;
        data.validate_for(spec)?;
        method.check_family(spec.family)?;
        let layout = if method.is_variational() {
            Layout::new(spec, structure)
        } else {
            Layout::psi_only(spec)
        };
        Ok(Problem {
            spec,
            data,
            layout,
            method,
            nu: spec.nu(),
        })
    }

    pub fn dim(&self) -> usize {
        self.layout.len
    }

    pub(crate) fn decode(&self, theta: &[f64]) -> Decoded {
        let params = self.layout.params_unchecked(theta, self.spec);
        let phi = (0..self.spec.m).map(|j| params.phi_j(j)).collect();
        Decoded {
            off: offsets(&params, &self.data.x),
            gamma: params.gamma,
            phi,
        }
    }

    fn check_len(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.layout.len {
            return Err(Error::PackedLength {
                expected: self.layout.len,
                found: theta.len(),
            });
        }
        if let Some(index) = theta.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinitePacked { index });
        }
        Ok(())
    }

    fn term(&self, y: f64, eta: f64, s: f64, phi: f64, grad: bool) -> Result<Term> {
        let family = self.spec.family;
        if self.method == Method::Va && family == Family::PoissonLog {
            let mu_s = exp(eta + 0.5 * s);
            return Ok(Term {
                value: y * eta - mu_s - ln_gamma(y + 1.0),
                d_eta: y - mu_s,
                d_s: -0.5 * mu_s,
                d_phi: 0.0,
            });
        }
        let (e, d): (FamilyEval, DispersionEval) = if grad && family.has_dispersion() {
            eval_both(family, y, eta, phi, self.nu)?
        } else {
            (eval_trusted(family, y, eta, phi, self.nu)?, DispersionEval::default())
        };
        Ok(Term {
            value: e.logf + 0.5 * e.d2 * s,
            d_eta: e.d1 + 0.5 * e.d3 * s,
            d_s: 0.5 * e.d2,
            d_phi: d.logf + 0.5 * d.d2 * s,
        })
    }

    /// Adds `g` to the gradient entries of every coordinate that enters the
    /// offset of `(i, j)`.
    fn add_offset_grad(&self, grad_psi: &mut [f64], i: usize, j: usize, g: f64) {
        let lay = &self.layout;
        grad_psi[j] += g;
        for c in 0..lay.q {
            grad_psi[lay.off_b + c * lay.m + j] += g * self.data.x[(i, c)];
        }
        if lay.row_effects && i > 0 {
            grad_psi[lay.off_alpha + i - 1] += g;
        }
    }

    /// Adds `g` (gradient w.r.t. `lambda_j` on the natural scale).
    fn add_lambda_grad(&self, grad_psi: &mut [f64], dec: &Decoded, j: usize, g: &[f64]) {
        for (k, gk) in g.iter().enumerate().take((j + 1).min(self.layout.p)) {
            let idx = self.layout.gamma_index(j, k);
            grad_psi[idx] += if j == k { gk * dec.gamma[(j, k)] } else { *gk };
        }
    }

    /// Contribution of unit `i` to a variational objective. With `grad`,
    /// adds the model-parameter gradient into `grad.0` (length `psi_len`)
    /// and writes the unit's variational gradient into `grad.1`.
    pub(crate) fn variational_unit(
        &self,
        dec: &Decoded,
        theta: &[f64],
        i: usize,
        mut grad: Option<(&mut [f64], &mut [f64])>,
    ) -> Result<f64> {
        let lay = &self.layout;
        let (m, p) = (lay.m, lay.p);
        let a = &theta[lay.off_a + i * p..lay.off_a + (i + 1) * p];
        let l = lay.chol_unchecked(theta, i);
        let want = grad.is_some();

        let mut lam = vec![0.0; p];
        let mut w = vec![0.0; p];
        let mut al = vec![0.0; p];
        let mut glam = vec![0.0; p];
        let mut ga = vec![0.0; p];
        let mut mmat = DMatrix::<f64>::zeros(p, p);
        let mut values = vec![0.0; m];

        for j in 0..m {
            for k in 0..p {
                lam[k] = dec.gamma[(j, k)];
            }
            let mut eta = dec.off[(i, j)];
            for k in 0..p {
                eta += a[k] * lam[k];
            }
            // w = L' lambda, s = |w|^2
            let mut s = 0.0;
            for c in 0..p {
                let mut acc = 0.0;
                for r in c..p {
                    acc += l[(r, c)] * lam[r];
                }
                w[c] = acc;
                s += acc * acc;
            }
            let y = self.data.y[(i, j)];
            let t = self.term(y, eta, s, dec.phi[j], want)?;
            if !t.value.is_finite() {
                return Err(Error::NonFiniteTerm { unit: i, response: j, eta });
            }
            values[j] = t.value;
            if let Some((gpsi, _)) = grad.as_mut() {
                self.add_offset_grad(gpsi, i, j, t.d_eta);
                // A lambda = L w
                for r in 0..p {
                    let mut acc = 0.0;
                    for c in 0..=r {
                        acc += l[(r, c)] * w[c];
                    }
                    al[r] = acc;
                }
                for k in 0..p {
                    glam[k] = t.d_eta * a[k] + 2.0 * t.d_s * al[k];
                    ga[k] += t.d_eta * lam[k];
                }
                self.add_lambda_grad(gpsi, dec, j, &glam);
                if lay.has_phi {
                    gpsi[lay.off_phi + j] += t.d_phi * dec.phi[j];
                }
                for r in 0..p {
                    for c in 0..p {
                        mmat[(r, c)] += t.d_s * lam[r] * lam[c];
                    }
                }
            }
        }

        let mut logdet = 0.0;
        let mut tr = 0.0;
        for r in 0..p {
            logdet += 2.0 * log(l[(r, r)]);
            for c in 0..=r {
                tr += l[(r, c)] * l[(r, c)];
            }
        }
        let aa: f64 = a.iter().map(|v| v * v).sum();
        values.push(0.5 * (logdet - aa - tr + p as f64));

        if let Some((_, gxi)) = grad {
            for k in 0..p {
                gxi[k] = ga[k] - a[k];
            }
            // d/dL of sum_j d_s lambda' L L' lambda + entropy
            let ml = &mmat * &l;
            for (t_idx, (r, c)) in lay.chol_entries().into_iter().enumerate() {
                let mut g = 2.0 * ml[(r, c)] - l[(r, c)];
                if r == c {
                    g = g * l[(r, r)] + 1.0;
                }
                gxi[p + t_idx] = g;
            }
        }
        Ok(pairwise_sum(&values))
    }

    /// `h(u) = sum_j log f(y_ij | u) - u'u/2` with gradient and `I - H`.
    /// With `kernel`, `h` drops terms constant in `u`.
    fn laplace_inner(
        &self,
        dec: &Decoded,
        i: usize,
        u: &DVector<f64>,
        kernel: bool,
    ) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let (m, p) = (self.layout.m, self.layout.p);
        let mut h = 0.0;
        let mut g = -u.clone();
        let mut k = DMatrix::<f64>::identity(p, p);
        for j in 0..m {
            let lam = dec.gamma.row(j);
            let eta = dec.off[(i, j)] + (0..p).map(|c| lam[c] * u[c]).sum::<f64>();
            let (y, phi) = (self.data.y[(i, j)], dec.phi[j]);
            let e = if kernel {
                eval_kernel(self.spec.family, y, eta, phi, self.nu)?
            } else {
                eval_trusted(self.spec.family, y, eta, phi, self.nu)?
            };
            if !e.logf.is_finite() || !e.d2.is_finite() {
                return Err(Error::NonFiniteTerm { unit: i, response: j, eta });
            }
            h += e.logf;
            for r in 0..p {
                g[r] += e.d1 * lam[r];
                for c in 0..p {
                    k[(r, c)] -= e.d2 * lam[r] * lam[c];
                }
            }
        }
        h -= 0.5 * u.dot(u);
        Ok((h, g, k))
    }

    /// Damped Newton ascent on `h` from `start`.
    pub(crate) fn laplace_mode(&self, dec: &Decoded, i: usize, start: &DVector<f64>) -> Result<DVector<f64>> {
        let p = self.layout.p;
        let mut u = start.clone();
        let (mut h, mut g, mut k) = self.laplace_inner(dec, i, &u, true)?;
        let mut polished = false;
        for _ in 0..INNER_MAX_ITER {
            let converged = g.amax() <= INNER_TOL;
            if converged && polished {
                return Ok(u);
            }
            let step = newton_direction(&k, &g, p);
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..=INNER_MAX_HALVINGS {
                let cand = &u + &step * t;
                if let Ok((hc, gc, kc)) = self.laplace_inner(dec, i, &cand, true) {
                    // near the mode h is flat to rounding; fall back on the gradient
                    let flat = hc >= h - 1e-12 * (1.0 + fabs(h)) && gc.amax() < g.amax();
                    if hc >= h || flat || (converged && hc >= h - 1e-12 * (1.0 + fabs(h))) {
                        u = cand;
                        h = hc;
                        g = gc;
                        k = kc;
                        accepted = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if converged {
                polished = true;
                if !accepted {
                    return Ok(u);
                }
                continue;
            }
            if !accepted {
                break;
            }
        }
        if g.amax() <= INNER_TOL {
            return Ok(u);
        }
        Err(Error::InnerNewton {
            unit: i,
            grad_norm: g.amax(),
        })
    }

    /// Laplace contribution of unit `i`; the mode is warm-started from and
    /// written back to `mode`.
    pub(crate) fn laplace_unit(
        &self,
        dec: &Decoded,
        i: usize,
        mode: &mut DVector<f64>,
        grad_psi: Option<&mut [f64]>,
    ) -> Result<f64> {
        let (m, p) = (self.layout.m, self.layout.p);
        let u = self.laplace_mode(dec, i, mode)?;
        let (h, _, k) = self.laplace_inner(dec, i, &u, false)?;
        let (wmat, logdet) = spd_inverse_logdet(&k).ok_or(Error::NonFiniteTerm {
            unit: i,
            response: 0,
            eta: f64::NAN,
        })?;
        let value = h - 0.5 * logdet;
        *mode = u.clone();
        let Some(gpsi) = grad_psi else {
            return Ok(value);
        };

        let mut evals = Vec::with_capacity(m);
        let mut wl = Vec::with_capacity(m);
        let mut wj = Vec::with_capacity(m);
        let mut v = DVector::<f64>::zeros(p);
        for j in 0..m {
            let lam: DVector<f64> = dec.gamma.row(j).transpose();
            let eta = dec.off[(i, j)] + lam.dot(&u);
            let y = self.data.y[(i, j)];
            let e = eval_trusted(self.spec.family, y, eta, dec.phi[j], self.nu)?;
            let d = if self.layout.has_phi {
                dispersion_trusted(self.spec.family, y, eta, dec.phi[j], self.nu)?
            } else {
                DispersionEval::default()
            };
            let wlam = &wmat * &lam;
            let w = lam.dot(&wlam);
            v += &lam * (0.5 * e.d3 * w);
            evals.push((e, d, lam));
            wl.push(wlam);
            wj.push(w);
        }
        let z = &wmat * v;
        let mut glam = vec![0.0; p];
        for j in 0..m {
            let (e, d, lam) = &evals[j];
            let zl = z.dot(lam);
            let big_g = e.d1 + 0.5 * e.d3 * wj[j] + e.d2 * zl;
            self.add_offset_grad(gpsi, i, j, big_g);
            for k in 0..p {
                glam[k] = big_g * u[k] + e.d2 * wl[j][k] + e.d1 * z[k];
            }
            self.add_lambda_grad(gpsi, dec, j, &glam);
            if self.layout.has_phi {
                gpsi[self.layout.off_phi + j] += (d.logf + 0.5 * d.d2 * wj[j] + d.d1 * zl) * dec.phi[j];
            }
        }
        Ok(value)
    }

    /// Objective value at `theta`. For Laplace fits `cache` supplies warm
    /// starts and receives the new modes.
    pub fn value(&self, theta: &[f64], cache: Option<&mut ModeCache>) -> Result<ObjectiveValue> {
        self.check_len(theta)?;
        let dec = self.decode(theta);
        let n = self.layout.n;
        let mut per_unit = Vec::with_capacity(n);
        if self.method.is_variational() {
            for i in 0..n {
                per_unit.push(self.variational_unit(&dec, theta, i, None)?);
            }
        } else {
            let mut local;
            let cache = match cache {
                Some(c) => c,
                None => {
                    local = ModeCache::new(n, self.layout.p);
                    &mut local
                }
            };
            let mut modes = cache.modes.clone();
            for (i, mode) in modes.iter_mut().enumerate() {
                per_unit.push(self.laplace_unit(&dec, i, mode, None)?);
            }
            cache.modes = modes;
        }
        Ok(ObjectiveValue::from_units(per_unit))
    }

    /// Value and gradient at `theta`; `grad` must have length `dim()`.
    pub fn value_grad(&self, theta: &[f64], grad: &mut [f64], cache: Option<&mut ModeCache>) -> Result<f64> {
        self.check_len(theta)?;
        if grad.len() != self.layout.len {
            return Err(Error::PackedLength {
                expected: self.layout.len,
                found: grad.len(),
            });
        }
        grad.fill(0.0);
        let dec = self.decode(theta);
        let lay = &self.layout;
        let n = lay.n;
        let mut per_unit = Vec::with_capacity(n);
        if self.method.is_variational() {
            let xi_len = lay.xi_len();
            let mut gxi = vec![0.0; xi_len];
            let (gpsi, rest) = grad.split_at_mut(lay.psi_len);
            for i in 0..n {
                per_unit.push(self.variational_unit(&dec, theta, i, Some((&mut *gpsi, &mut gxi)))?);
                let idx = lay.xi_indices(i);
                for (t, &ix) in idx.iter().enumerate() {
                    rest[ix - lay.psi_len] = gxi[t];
                }
            }
        } else {
            let mut local;
            let cache = match cache {
                Some(c) => c,
                None => {
                    local = ModeCache::new(n, lay.p);
                    &mut local
                }
            };
            let mut modes = cache.modes.clone();
            for (i, mode) in modes.iter_mut().enumerate() {
                per_unit.push(self.laplace_unit(&dec, i, mode, Some(&mut *grad))?);
            }
            cache.modes = modes;
        }
        Ok(pairwise_sum(&per_unit))
    }

    /// Contribution and gradient of a single unit: the model-parameter part
    /// (length `psi_len`) and the unit's own variational part.
    pub fn unit_grad(&self, theta: &[f64], i: usize) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        self.check_len(theta)?;
        if !self.method.is_variational() {
            return Err(Error::Config("per-unit gradients require a variational method".into()));
        }
        let dec = self.decode(theta);
        let mut gpsi = vec![0.0; self.layout.psi_len];
        let mut gxi = vec![0.0; self.layout.xi_len()];
        let v = self.variational_unit(&dec, theta, i, Some((&mut gpsi, &mut gxi)))?;
        Ok((v, gpsi, gxi))
    }

    /// Laplace modes and covariances at `theta` (model-parameter block).
    pub fn laplace_modes(&self, theta: &[f64], cache: Option<&ModeCache>) -> Result<Vec<UnitMode>> {
        let dec = self.decode(theta);
        let p = self.layout.p;
        (0..self.layout.n)
            .map(|i| {
                let start = cache.map_or_else(|| DVector::zeros(p), |c| c.modes[i].clone());
                let mode = self.laplace_mode(&dec, i, &start)?;
                let (_, _, k) = self.laplace_inner(&dec, i, &mode, true)?;
                let (covariance, _) = spd_inverse_logdet(&k).ok_or(Error::NonFiniteTerm {
                    unit: i,
                    response: 0,
                    eta: f64::NAN,
                })?;
                Ok(UnitMode { mode, covariance })
            })
            .collect()
    }
}

/// Solves `K d = g`, adding a ridge until `K` is positive definite.
fn newton_direction(k: &DMatrix<f64>, g: &DVector<f64>, p: usize) -> DVector<f64> {
    let mut ridge = 0.0;
    for _ in 0..60 {
        let kr = k + DMatrix::<f64>::identity(p, p) * ridge;
        if let Some(ch) = nalgebra::Cholesky::new(kr) {
            return ch.solve(g);
        }
        ridge = if ridge == 0.0 { 1e-6 } else { ridge * 10.0 };
    }
    g.clone()
}

fn full_theta(spec: &ModelSpec, params: &Parameters, var: &VariationalParams, layout: &Layout) -> Result<Vec<f64>> {
    layout.pack(spec, params, Some(var)).map(|p| p.into_inner())
}

fn variational_value(
    method: Method,
    spec: &ModelSpec,
    data: &ResponseData,
    params: &Parameters,
    var: &VariationalParams,
) -> Result<ObjectiveValue> {
    let problem = Problem::new(spec, data, method, CovStructure::Full)?;
    let theta = full_theta(spec, params, var, &problem.layout)?;
    problem.value(&theta, None)
}

/// EVA objective at `(params, var)`.
pub fn eva_objective(
    spec: &ModelSpec,
    data: &ResponseData,
    params: &Parameters,
    var: &VariationalParams,
) -> Result<ObjectiveValue> {
    variational_value(Method::Eva, spec, data, params, var)
}

/// Standard variational lower bound; Gaussian and Poisson families only.
pub fn va_objective(
    spec: &ModelSpec,
    data: &ResponseData,
    params: &Parameters,
    var: &VariationalParams,
) -> Result<ObjectiveValue> {
    variational_value(Method::Va, spec, data, params, var)
}

/// Gradient of the EVA objective aligned with `Layout::new(spec, structure)`.
pub fn eva_gradient(
    spec: &ModelSpec,
    data: &ResponseData,
    params: &Parameters,
    var: &VariationalParams,
    structure: CovStructure,
) -> Result<Vec<f64>> {
    let problem = Problem::new(spec, data, Method::Eva, structure)?;
    let theta = full_theta(spec, params, var, &problem.layout)?;
    let mut grad = vec![0.0; theta.len()];
    problem.value_grad(&theta, &mut grad, None)?;
    Ok(grad)
}

/// Laplace approximation to the marginal log-likelihood.
pub fn laplace_objective(spec: &ModelSpec, data: &ResponseData, params: &Parameters) -> Result<ObjectiveValue> {
    let problem = Problem::new(spec, data, Method::Laplace, CovStructure::Full)?;
    let theta = problem.layout.pack(spec, params, None)?.into_inner();
    problem.value(&theta, None)
}

/// Gradient of the Laplace objective aligned with `Layout::psi_only(spec)`.
pub fn laplace_gradient(spec: &ModelSpec, data: &ResponseData, params: &Parameters) -> Result<Vec<f64>> {
    let problem = Problem::new(spec, data, Method::Laplace, CovStructure::Full)?;
    let theta = problem.layout.pack(spec, params, None)?.into_inner();
    let mut grad = vec![0.0; theta.len()];
    problem.value_grad(&theta, &mut grad, None)?;
    Ok(grad)
}

/// `sum_j d2_ij lambda_j' A_i lambda_j`, the trace of the conditional
/// log-density Hessian at `a_i` against `A_i`.
pub fn curvature_term(
    spec: &ModelSpec,
    data: &ResponseData,
    params: &Parameters,
    var: &VariationalParams,
    i: usize,
) -> Result<f64> {
    let eta = crate::model::linear_predictor(spec, params, &data.x, &var.a)?;
    let a_i = var.covariance(i);
    let mut total = 0.0;
    for j in 0..spec.m {
        let lam = params.lambda(j);
        let e = spec
            .family
            .eval(data.y[(i, j)], eta[(i, j)], params.phi_j(j), spec.nu())?;
        total += e.d2 * lam.dot(&(&a_i * &lam));
    }
    Ok(total)
}
