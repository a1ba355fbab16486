//! Small dense helpers on top of nalgebra.

use libm::{fabs, log};
use nalgebra::{Cholesky, DMatrix, SymmetricEigen};

/// Inverse and log-determinant of a symmetric positive definite matrix.
pub fn spd_inverse_logdet(m: &DMatrix<f64>) -> Option<(DMatrix<f64>, f64)> {
    let chol = Cholesky::new(m.clone())?;
    let l = chol.l_dirty();
    let mut logdet = 0.0;
    for k in 0..m.nrows() {
        let d = l[(k, k)];
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        logdet += 2.0 * log(d);
    }
    Some((chol.inverse(), logdet))
}

/// Lower Cholesky factor, if the matrix is positive definite.
pub fn cholesky_lower(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    Cholesky::new(m.clone()).map(|c| c.l())
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for r in 0..n {
        for c in 0..r {
            let v = 0.5 * (m[(r, c)] + m[(c, r)]);
            m[(r, c)] = v;
            m[(c, r)] = v;
        }
    }
}

/// Outcome of a symmetric pseudo-inverse.
pub struct PseudoInverse {
    pub inverse: DMatrix<f64>,
    /// Number of eigenvalues treated as zero.
    pub dropped: usize,
    /// Number of negative eigenvalues kept.
    pub negative: usize,
    /// Ratio of largest to smallest absolute eigenvalue.
    pub condition: f64,
}

/// Pseudo-inverse of a symmetric matrix through its eigendecomposition.
/// Eigenvalues below `rel_tol * max |lambda|` in magnitude are dropped.
pub fn symmetric_pinv(m: &DMatrix<f64>, rel_tol: f64) -> PseudoInverse {
    let n = m.nrows();
    if n == 0 {
        return PseudoInverse {
            inverse: DMatrix::zeros(0, 0),
            dropped: 0,
            negative: 0,
            condition: 1.0,
        };
    }
    let eig = SymmetricEigen::new(m.clone());
    let max_abs = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(fabs(*v)));
    let min_abs = eig.eigenvalues.iter().fold(f64::INFINITY, |a, v| a.min(fabs(*v)));
    let cut = rel_tol * max_abs;
    let mut inv_vals = eig.eigenvalues.clone();
    let mut dropped = 0;
    let mut negative = 0;
    for v in inv_vals.iter_mut() {
        if fabs(*v) <= cut || *v == 0.0 {
            *v = 0.0;
            dropped += 1;
        } else {
            if *v < 0.0 {
                negative += 1;
            }
            *v = 1.0 / *v;
        }
    }
    let q = &eig.eigenvectors;
    let mut inverse = q * DMatrix::from_diagonal(&inv_vals) * q.transpose();
    symmetrize(&mut inverse);
    PseudoInverse {
        inverse,
        dropped,
        negative,
        condition: if min_abs > 0.0 { max_abs / min_abs } else { f64::INFINITY },
    }
}

/// Projects a symmetric matrix onto the PSD cone by flooring eigenvalues at
/// zero. Returns the projection and whether anything was clipped.
pub fn psd_project(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let eig = SymmetricEigen::new(m.clone());
    if eig.eigenvalues.iter().all(|v| *v >= 0.0) {
        return (m.clone(), false);
    }
    let vals = eig.eigenvalues.map(|v| v.max(0.0));
    let q = &eig.eigenvectors;
    let mut out = q * DMatrix::from_diagonal(&vals) * q.transpose();
    symmetrize(&mut out);
    (out, true)
}

/// Condition number `max |lambda| / min |lambda|` of a symmetric matrix.
pub fn symmetric_condition(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let vals = SymmetricEigen::new(m.clone()).eigenvalues;
    let max_abs = vals.iter().fold(0.0f64, |a, v| a.max(fabs(*v)));
    let min_abs = vals.iter().fold(f64::INFINITY, |a, v| a.min(fabs(*v)));
    if min_abs > 0.0 {
        max_abs / min_abs
    } else {
        f64::INFINITY
    }
}

/// In-place lower Cholesky factor of a row-major `p x p` symmetric matrix.
/// The strict upper triangle is zeroed. Returns `false` if the matrix is not
/// numerically positive definite.
pub fn cholesky_in_place(a: &mut [f64], p: usize) -> bool {
    for j in 0..p {
        let mut d = a[j * p + j];
        for k in 0..j {
            d -= a[j * p + k] * a[j * p + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        let d = libm::sqrt(d);
        a[j * p + j] = d;
        for i in j + 1..p {
            let mut v = a[i * p + j];
            for k in 0..j {
                v -= a[i * p + k] * a[j * p + k];
            }
            a[i * p + j] = v / d;
        }
        for k in j + 1..p {
            a[j * p + k] = 0.0;
        }
    }
    true
}

/// Solves `L L' x = b` in place for a row-major lower factor `l`.
pub fn cholesky_solve(l: &[f64], b: &mut [f64], p: usize) {
    for i in 0..p {
        let mut v = b[i];
        for k in 0..i {
            v -= l[i * p + k] * b[k];
        }
        b[i] = v / l[i * p + i];
    }
    for i in (0..p).rev() {
        let mut v = b[i];
        for k in i + 1..p {
            v -= l[k * p + i] * b[k];
        }
        b[i] = v / l[i * p + i];
    }
}

/// Writes `(L L')^{-1}` (row-major) into `out`; `col` is scratch of length `p`.
pub fn cholesky_inverse(l: &[f64], out: &mut [f64], col: &mut [f64], p: usize) {
    for c in 0..p {
        col.fill(0.0);
        col[c] = 1.0;
        cholesky_solve(l, col, p);
        for r in 0..p {
            out[r * p + c] = col[r];
        }
    }
}
