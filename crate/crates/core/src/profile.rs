//! EVA objective profiled over the variational parameters.
//!
//! For fixed model parameters the optimal `A_i` given `a_i` is available in
//! closed form (`(I - sum_j d2_ij lambda_j lambda_j')^{-1}`, or its diagonal
//! analogue), so each unit's variational block is solved by alternating a
//! damped Newton step in `a_i` with that exact covariance update. The outer
//! problem is then over the model parameters alone, with gradient equal to
//! the partial gradient of the joint objective at the inner optimum.

use alloc::vec;
use alloc::vec::Vec;

use libm::{fabs, log, sqrt};
use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::family::eval_kernel;
use crate::linalg::{cholesky_in_place, cholesky_inverse, cholesky_solve};
use crate::model::CovStructure;
use crate::objective::{Decoded, Method, Problem};
use crate::special::pairwise_sum;

const TOL: f64 = 1e-7;
const MAX_ITER: usize = 200;
const MAX_HALVINGS: usize = 50;

/// Warm starts for the per-unit variational means, plus the full packed
/// vector at the last evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileCache {
    pub means: Vec<DVector<f64>>,
    pub theta: Vec<f64>,
}

impl ProfileCache {
    pub fn new(problem: &Problem) -> Self {
        let lay = &problem.layout;
        ProfileCache {
            means: vec![DVector::zeros(lay.p); lay.n],
            theta: vec![0.0; lay.len],
        }
    }
}

/// Scratch buffers for the per-unit solves; matrices are row-major `p x p`.
struct Work {
    p: usize,
    /// Loadings copied row-major, `m x p`.
    lam: Vec<f64>,
    /// `(log f up to a constant, d1, d2, d3)` per response.
    terms: Vec<[f64; 4]>,
    /// `I - sum_j d2 lambda lambda'`.
    k: Vec<f64>,
    /// Cholesky factor of `k`, valid when `k_ok`.
    lk: Vec<f64>,
    k_ok: bool,
    cov: Vec<f64>,
    grad: Vec<f64>,
    step: Vec<f64>,
    col: Vec<f64>,
    cand: Vec<f64>,
    cand_terms: Vec<[f64; 4]>,
    cand_k: Vec<f64>,
    cand_grad: Vec<f64>,
}

impl Work {
    fn new(dec: &Decoded, m: usize, p: usize) -> Self {
        let mut lam = vec![0.0; m * p];
        for j in 0..m {
            for c in 0..p {
                lam[j * p + c] = dec.gamma[(j, c)];
            }
        }
        Work {
            p,
            lam,
            terms: vec![[0.0; 4]; m],
            k: vec![0.0; p * p],
            lk: vec![0.0; p * p],
            k_ok: false,
            cov: vec![0.0; p * p],
            grad: vec![0.0; p],
            step: vec![0.0; p],
            col: vec![0.0; p],
            cand: vec![0.0; p],
            cand_terms: vec![[0.0; 4]; m],
            cand_k: vec![0.0; p * p],
            cand_grad: vec![0.0; p],
        }
    }
}

fn amax(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, x| if fabs(*x) > acc || x.is_nan() { fabs(*x) } else { acc })
}

fn bad_unit(i: usize) -> Error {
    Error::NonFiniteTerm {
        unit: i,
        response: 0,
        eta: f64::NAN,
    }
}

impl Problem<'_> {
    /// Whether the profiled strategy applies to this problem.
    pub fn supports_profile(&self) -> bool {
        self.method == Method::Eva
            || (self.method == Method::Va && self.spec.family == crate::model::Family::GaussianIdentity)
    }

    /// Profiled objective over the model-parameter block `psi` (length
    /// `layout.psi_len`); writes its gradient into `grad_psi`.
    pub fn profile_value_grad(&self, psi: &[f64], grad_psi: &mut [f64], cache: &mut ProfileCache) -> Result<f64> {
        let lay = &self.layout;
        if !self.supports_profile() {
            return Err(Error::Config("profiled fitting requires the EVA objective".into()));
        }
        if psi.len() != lay.psi_len || grad_psi.len() != lay.psi_len {
            return Err(Error::PackedLength {
                expected: lay.psi_len,
                found: psi.len(),
            });
        }
        if let Some(index) = psi.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinitePacked { index });
        }
        let mut theta = vec![0.0; lay.len];
        theta[..lay.psi_len].copy_from_slice(psi);
        let dec = self.decode(&theta);
        let mut w = Work::new(&dec, lay.m, lay.p);
        let mut means = cache.means.clone();
        for (i, a) in means.iter_mut().enumerate() {
            self.profile_unit(&dec, i, a.as_mut_slice(), &mut w)?;
            self.write_xi(&mut theta, i, a.as_slice(), &mut w)?;
        }
        grad_psi.fill(0.0);
        let mut gxi = vec![0.0; lay.xi_len()];
        let mut per_unit = Vec::with_capacity(lay.n);
        for i in 0..lay.n {
            per_unit.push(self.variational_unit(&dec, &theta, i, Some((&mut *grad_psi, &mut gxi)))?);
        }
        cache.means = means;
        cache.theta = theta;
        Ok(pairwise_sum(&per_unit))
    }

    fn write_xi(&self, theta: &mut [f64], i: usize, a: &[f64], w: &mut Work) -> Result<()> {
        let lay = &self.layout;
        let p = lay.p;
        theta[lay.off_a + i * p..lay.off_a + (i + 1) * p].copy_from_slice(a);
        // the candidate buffer is free here
        let l = &mut w.cand_k;
        l.copy_from_slice(&w.cov);
        if !cholesky_in_place(l, p) {
            return Err(bad_unit(i));
        }
        for (r, c) in lay.chol_entries() {
            theta[lay.chol_index(i, r, c)] = if r == c { log(l[r * p + r]) } else { l[r * p + c] };
        }
        Ok(())
    }

    /// Family terms and curvature matrix of unit `i` at mean `a`.
    fn unit_evals(&self, dec: &Decoded, i: usize, a: &[f64], lam: &[f64], terms: &mut [[f64; 4]], k: &mut [f64]) -> Result<()> {
        let p = a.len();
        k.fill(0.0);
        for r in 0..p {
            k[r * p + r] = 1.0;
        }
        for (j, t) in terms.iter_mut().enumerate() {
            let lj = &lam[j * p..(j + 1) * p];
            let mut eta = dec.off[(i, j)];
            for c in 0..p {
                eta += lj[c] * a[c];
            }
            let e = eval_kernel(self.spec.family, self.data.y[(i, j)], eta, dec.phi[j], self.spec.nu())?;
            if !e.logf.is_finite() || !e.d2.is_finite() || !e.d3.is_finite() {
                return Err(Error::NonFiniteTerm { unit: i, response: j, eta });
            }
            for r in 0..p {
                let dr = e.d2 * lj[r];
                for c in 0..=r {
                    k[r * p + c] -= dr * lj[c];
                }
            }
            *t = [e.logf, e.d1, e.d2, e.d3];
        }
        for r in 0..p {
            for c in 0..r {
                k[c * p + r] = k[r * p + c];
            }
        }
        Ok(())
    }

    /// Factors `w.k` and sets `w.cov` to the optimal covariance for it.
    fn update_cov(&self, i: usize, w: &mut Work) -> Result<()> {
        let p = w.p;
        w.lk.copy_from_slice(&w.k);
        w.k_ok = cholesky_in_place(&mut w.lk, p);
        match self.layout.structure {
            Some(CovStructure::Diagonal) => {
                w.cov.fill(0.0);
                for r in 0..p {
                    let d = w.k[r * p + r];
                    if !(d > 0.0) || !d.is_finite() {
                        return Err(bad_unit(i));
                    }
                    w.cov[r * p + r] = 1.0 / d;
                }
            }
            _ => {
                if !w.k_ok {
                    return Err(bad_unit(i));
                }
                cholesky_inverse(&w.lk, &mut w.cov, &mut w.col, p);
            }
        }
        Ok(())
    }

    /// Solves unit `i`'s variational block; `a` is the warm start and
    /// receives the optimal mean, `w.cov` the optimal covariance.
    fn profile_unit(&self, dec: &Decoded, i: usize, a: &mut [f64], w: &mut Work) -> Result<()> {
        let p = w.p;
        self.unit_evals(dec, i, a, &w.lam, &mut w.terms, &mut w.k)?;
        // covariance update: exact given the current mean
        self.update_cov(i, w)?;
        let mut value = unit_value(&w.lam, &w.terms, a, &w.cov, &mut w.grad);
        for _ in 0..MAX_ITER {
            let gmax = amax(&w.grad);
            if gmax <= TOL {
                return Ok(());
            }
            w.step.copy_from_slice(&w.grad);
            if w.k_ok {
                cholesky_solve(&w.lk, &mut w.step, p);
            } else {
                let scale = 1.0 + sqrt(w.k.iter().map(|v| v * v).sum::<f64>() / p as f64);
                for s in w.step.iter_mut() {
                    *s /= scale;
                }
            }
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..=MAX_HALVINGS {
                for r in 0..p {
                    w.cand[r] = a[r] + t * w.step[r];
                }
                if self.unit_evals(dec, i, &w.cand, &w.lam, &mut w.cand_terms, &mut w.cand_k).is_ok() {
                    let vc = unit_value(&w.lam, &w.cand_terms, &w.cand, &w.cov, &mut w.cand_grad);
                    let flat = vc >= value - 1e-12 * (1.0 + fabs(value)) && amax(&w.cand_grad) < gmax;
                    if vc >= value || flat {
                        a.copy_from_slice(&w.cand);
                        core::mem::swap(&mut w.terms, &mut w.cand_terms);
                        core::mem::swap(&mut w.k, &mut w.cand_k);
                        accepted = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
            self.update_cov(i, w)?;
            value = unit_value(&w.lam, &w.terms, a, &w.cov, &mut w.grad);
        }
        let gmax = amax(&w.grad);
        if gmax <= TOL {
            return Ok(());
        }
        Err(Error::InnerNewton { unit: i, grad_norm: gmax })
    }
}

/// `sum_j [log f + d2 s / 2] - a'a/2` and its gradient in `a` at fixed
/// covariance.
fn unit_value(lam: &[f64], terms: &[[f64; 4]], a: &[f64], cov: &[f64], grad: &mut [f64]) -> f64 {
    let p = a.len();
    let mut value = 0.0;
    for r in 0..p {
        value -= 0.5 * a[r] * a[r];
        grad[r] = -a[r];
    }
    for (j, t) in terms.iter().enumerate() {
        let lj = &lam[j * p..(j + 1) * p];
        let mut s = 0.0;
        for r in 0..p {
            let row = &cov[r * p..(r + 1) * p];
            let mut acc = 0.0;
            for c in 0..p {
                acc += row[c] * lj[c];
            }
            s += lj[r] * acc;
        }
        value += t[0] + 0.5 * t[2] * s;
        let d_eta = t[1] + 0.5 * t[3] * s;
        for r in 0..p {
            grad[r] += d_eta * lj[r];
        }
    }
    value
}
