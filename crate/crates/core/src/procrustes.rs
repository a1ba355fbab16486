//! Orthogonal Procrustes comparison of two configurations.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

fn centered(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    out
}

/// Relative error of `est` against `truth` after both are column-centered
/// and `est` is optimally rotated and scaled:
/// `min_{R, s} ||T - s E R||_F^2 / ||T||_F^2`.
///
/// Not symmetric in its arguments.
pub fn procrustes_error(truth: &DMatrix<f64>, est: &DMatrix<f64>) -> Result<f64> {
    if truth.shape() != est.shape() {
        return Err(Error::DimensionMismatch {
            matrix: "M_est",
            expected_rows: truth.nrows(),
            expected_cols: truth.ncols(),
            found_rows: est.nrows(),
            found_cols: est.ncols(),
        });
    }
    let t = centered(truth);
    let e = centered(est);
    let tn = t.norm_squared();
    if !(tn > 0.0) {
        return Err(Error::ZeroNorm("M_true"));
    }
    let en = e.norm_squared();
    if !(en > 0.0) {
        return Err(Error::ZeroNorm("M_est"));
    }
    let svd = (e.transpose() * &t).svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let rotation = u * v_t;
    let scale = svd.singular_values.sum() / en;
    let fitted = e * rotation * scale;
    Ok((t - fitted).norm_squared() / tn)
}
