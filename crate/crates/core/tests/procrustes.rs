use eva_gllvm_core::{procrustes_error, Error};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn rotation(theta: f64, reflect: bool) -> DMatrix<f64> {
    let (s, c) = theta.sin_cos();
    let r = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
    if reflect {
        r * DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])
    } else {
        r
    }
}

fn centered(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for c in 0..m.ncols() {
        let mean = m.column(c).mean();
        for r in 0..m.nrows() {
            out[(r, c)] -= mean;
        }
    }
    out
}

/// Two-dimensional reference: for a rotation by angle t (optionally after a
/// reflection), the cross term is `a cos t + b sin t`, maximized at
/// `atan2(b, a)`; the best scale then follows from least squares.
fn planar_reference(truth: &DMatrix<f64>, est: &DMatrix<f64>) -> f64 {
    let t = centered(truth);
    let mut best = f64::INFINITY;
    for reflect in [false, true] {
        let e = centered(est)
            * if reflect {
                DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])
            } else {
                DMatrix::identity(2, 2)
            };
        let (mut a, mut b) = (0.0, 0.0);
        for r in 0..t.nrows() {
            a += e[(r, 0)] * t[(r, 0)] + e[(r, 1)] * t[(r, 1)];
            b += e[(r, 1)] * t[(r, 0)] - e[(r, 0)] * t[(r, 1)];
        }
        let angle = b.atan2(a);
        let rotated = &e * rotation(angle, false);
        let scale = rotated.dot(&t) / rotated.norm_squared();
        let err = (&t - rotated * scale).norm_squared() / t.norm_squared();
        best = best.min(err);
    }
    best
}

#[test]
fn identical_configurations_have_zero_error() {
    let m = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, -1.0, 0.5, 0.3, -2.0, 2.0, 1.0]);
    assert!(procrustes_error(&m, &m).unwrap() <= 1e-15);
}

#[test]
fn hand_instance_matches_planar_reference() {
    let truth = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 2.0, -1.0, -1.0]);
    let est = DMatrix::from_row_slice(3, 2, &[0.8, 0.3, -0.2, 1.5, -0.7, -1.2]);
    let got = procrustes_error(&truth, &est).unwrap();
    let want = planar_reference(&truth, &est);
    assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    assert!(got > 0.0);
}

#[test]
fn zero_norm_and_shape_errors() {
    let truth = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 2.0, -1.0, -1.0]);
    let flat = DMatrix::from_element(3, 2, 4.0);
    assert_eq!(procrustes_error(&flat, &truth), Err(Error::ZeroNorm("M_true")));
    assert_eq!(procrustes_error(&truth, &flat), Err(Error::ZeroNorm("M_est")));
    assert!(procrustes_error(&truth, &DMatrix::zeros(2, 2)).is_err());
}

fn config(rows: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * 2).prop_map(move |v| DMatrix::from_vec(rows, 2, v))
}

proptest! {
    #[test]
    fn invariant_to_rotation_translation_and_scale(
        truth in config(6),
        noise in config(6),
        theta in -3.2f64..3.2,
        reflect in any::<bool>(),
        shift in prop::array::uniform2(-5.0f64..5.0),
        scale in 0.1f64..10.0,
    ) {
        prop_assume!(centered(&truth).norm() > 0.5);
        let est = &truth + noise * 0.3;
        prop_assume!(centered(&est).norm() > 0.5);
        let base = procrustes_error(&truth, &est).unwrap();
        let mut moved = &est * rotation(theta, reflect) * scale;
        for r in 0..moved.nrows() {
            moved[(r, 0)] += shift[0];
            moved[(r, 1)] += shift[1];
        }
        let got = procrustes_error(&truth, &moved).unwrap();
        prop_assert!((got - base).abs() <= 1e-12, "{} vs {}", got, base);
        let exact = procrustes_error(&truth, &(&truth * rotation(theta, reflect) * scale)).unwrap();
        prop_assert!(exact <= 1e-12, "{}", exact);
    }

    #[test]
    fn agrees_with_planar_reference(truth in config(5), est in config(5)) {
        prop_assume!(centered(&truth).norm() > 0.5 && centered(&est).norm() > 0.5);
        let got = procrustes_error(&truth, &est).unwrap();
        prop_assert!((got - planar_reference(&truth, &est)).abs() <= 1e-10);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&got));
    }
}
