use eva_gllvm_core::inference::{fd_information, wald_interval, UnitInformation, CHI2_2_95, Z_95};
use eva_gllvm_core::simulate::{simulate_dataset, stream_rng, synthetic_covariates, synthetic_truth};
use eva_gllvm_core::{
    cmsep, dunn_smyth_residuals, fit, linear_predictor, observed_information, ordination, variance_explained, wald,
    Error, Family, FitConfig, FitResult, Method, ModelSpec, Parameters, ResponseData,
};
use nalgebra::{DMatrix, DVector};

fn simulated(family: Family, n: usize, m: usize, p: usize, q: usize, seed: u64) -> (ModelSpec, ResponseData, Parameters, DMatrix<f64>) {
    let spec = ModelSpec::new(family, n, m, p, q).unwrap();
    let truth = synthetic_truth(&spec, &mut stream_rng(seed, 0));
    let mut rng = stream_rng(seed, 1);
    let x = synthetic_covariates(n, q, &mut rng);
    let sim = simulate_dataset(&spec, &truth, &x, None, &mut rng).unwrap();
    (spec, sim.data, truth, sim.scores)
}

fn fitted(spec: &ModelSpec, data: &ResponseData, method: Method) -> FitResult {
    let cfg = FitConfig {
        method,
        n_starts: 1,
        ..FitConfig::default()
    };
    fit(spec, data, &cfg).unwrap()
}

#[test]
fn information_of_a_quadratic_is_its_hessian() {
    let h = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, -0.5, 1.0, 3.0, 0.2, -0.5, 0.2, 2.0]);
    let b = DVector::from_vec(vec![0.3, -1.0, 2.0]);
    let info = fd_information(
        |x, g| {
            let gv = -&h * DVector::from_column_slice(x) + &b;
            g.copy_from_slice(gv.as_slice());
            Ok(())
        },
        &[0.5, -2.0, 7.0],
    )
    .unwrap();
    assert!((&info - &h).amax() <= 1e-6);
    assert_eq!(&info, &info.transpose());
}

#[test]
fn block_inverse_matches_dense_inverse() {
    let (spec, data, _, _) = simulated(Family::PoissonLog, 25, 4, 1, 1, 1);
    let result = fitted(&spec, &data, Method::Eva);
    let info = observed_information(&result, &spec, &data).unwrap();
    assert!(info.notes.is_empty(), "{:?}", info.notes);
    let layout = result.problem(&spec, &data).unwrap().layout;
    let dense = info.dense(&layout);
    assert_eq!((&dense - dense.transpose()).amax(), 0.0);
    let inv = dense.clone().try_inverse().unwrap();
    let pl = layout.psi_len;
    let block = inv.view((0, 0), (pl, pl));
    let scale = block.amax();
    assert!((&info.psi_inverse - block).amax() <= 1e-8 * scale, "{}", (&info.psi_inverse - block).amax());
}

/// For Gaussian responses the profiled objective is the exact marginal
/// likelihood, so the intercept standard errors are those of a sample mean
/// with covariance `Gamma Gamma' + diag(phi^2)`.
#[test]
fn gaussian_intercept_standard_errors() {
    let (spec, data, _, _) = simulated(Family::GaussianIdentity, 100, 4, 1, 0, 2);
    let result = fitted(&spec, &data, Method::Eva);
    let info = observed_information(&result, &spec, &data).unwrap();
    let report = wald(&result, &spec, &info, Z_95).unwrap();
    let g = &result.params.gamma;
    let phi = result.params.phi.as_ref().unwrap();
    for j in 0..spec.m {
        let sigma_jj = g.row(j).norm_squared() + phi[j] * phi[j];
        let want = (sigma_jj / spec.n as f64).sqrt();
        let got = report.se.beta0[j];
        assert!((got - want).abs() <= 1e-3 * want, "response {j}: {got} vs {want}");
    }
}

#[test]
fn wald_interval_arithmetic() {
    let (lo, hi) = wald_interval(1.0, 0.5, 1.96, false);
    assert!((lo - 0.02).abs() < 1e-12 && (hi - 1.98).abs() < 1e-12);
    let t = 0.4f64;
    let (lo, hi) = wald_interval(t, 0.3, Z_95, true);
    assert!(lo > 0.0 && lo < t.exp() && t.exp() < hi);
}

#[test]
fn wald_report_brackets_every_estimate() {
    let (spec, data, _, _) = simulated(Family::NegBinomialLog, 60, 5, 2, 1, 3);
    let result = fitted(&spec, &data, Method::Eva);
    let info = observed_information(&result, &spec, &data).unwrap();
    let report = wald(&result, &spec, &info, Z_95).unwrap();
    assert!(report.info_condition >= 1.0);
    for iv in &report.intervals {
        if iv.se.is_finite() {
            assert!(iv.lower <= iv.estimate && iv.estimate <= iv.upper, "{iv:?}");
        }
        if iv.name.starts_with("phi") {
            assert!(iv.log_scale && iv.lower > 0.0);
        }
    }
    let phi = result.params.phi.as_ref().unwrap();
    let (lo, hi) = (report.ci_lower.phi.as_ref().unwrap(), report.ci_upper.phi.as_ref().unwrap());
    for j in 0..spec.m {
        assert!(lo[j] > 0.0 && lo[j] <= phi[j] && phi[j] <= hi[j]);
    }
}

#[test]
fn prediction_covariance_without_parameter_coupling_is_the_variational_one() {
    let (spec, data, _, _) = simulated(Family::GaussianIdentity, 20, 4, 2, 0, 4);
    let result = fitted(&spec, &data, Method::Eva);
    let mut info = observed_information(&result, &spec, &data).unwrap();
    for u in info.units.iter_mut() {
        *u = UnitInformation {
            own: u.own.clone(),
            cross: DMatrix::zeros(u.cross.nrows(), u.cross.ncols()),
        };
    }
    let c = cmsep(&result, &spec, &data, &info).unwrap();
    for i in 0..spec.n {
        assert_eq!(c.matrices[i], result.varparams.covariance(i));
    }
}

#[test]
fn prediction_covariance_dominates_for_both_approximations() {
    let (spec, data, _, _) = simulated(Family::PoissonLog, 40, 5, 2, 1, 5);
    for method in [Method::Eva, Method::Laplace] {
        let result = fitted(&spec, &data, method);
        let info = observed_information(&result, &spec, &data).unwrap();
        let c = cmsep(&result, &spec, &data, &info).unwrap();
        for i in 0..spec.n {
            let base = result.varparams.covariance(i).trace();
            assert!(c.matrices[i].trace() >= base, "{method:?} unit {i}");
            assert!(c.matrices[i].symmetric_eigenvalues().min() >= -1e-12);
        }
    }
}

#[test]
fn gaussian_prediction_ellipses_cover_true_scores() {
    let (spec, data, _, scores) = simulated(Family::GaussianIdentity, 500, 8, 2, 1, 6);
    let result = fitted(&spec, &data, Method::Eva);
    let info = observed_information(&result, &spec, &data).unwrap();
    let c = cmsep(&result, &spec, &data, &info).unwrap();
    let ord = ordination(&result, &c);
    let ellipses = ord.ellipses().unwrap();
    let mut inside = 0;
    for (i, e) in ellipses.iter().enumerate() {
        assert!((e.radius * e.radius - CHI2_2_95).abs() <= 1e-12);
        let cov = DMatrix::from_row_slice(2, 2, &[e.cov[0][0], e.cov[0][1], e.cov[1][0], e.cov[1][1]]);
        let d = DVector::from_vec(vec![scores[(i, 0)] - e.center[0], scores[(i, 1)] - e.center[1]]);
        let m2 = d.dot(&(cov.try_inverse().unwrap() * &d));
        if m2 <= e.radius * e.radius {
            inside += 1;
        }
    }
    let coverage = inside as f64 / spec.n as f64;
    assert!((0.90..=0.99).contains(&coverage), "coverage {coverage}");
}

#[test]
fn ellipses_only_in_two_dimensions() {
    let (spec, data, _, _) = simulated(Family::GaussianIdentity, 15, 4, 1, 0, 7);
    let result = fitted(&spec, &data, Method::Eva);
    let info = observed_information(&result, &spec, &data).unwrap();
    let ord = ordination(&result, &cmsep(&result, &spec, &data, &info).unwrap());
    assert!(ord.ellipses().is_none());
    let iv = ord.marginal_intervals(Z_95);
    for (i, row) in iv.iter().enumerate() {
        assert!(row[0].0 < ord.scores[(i, 0)] && ord.scores[(i, 0)] < row[0].1);
    }
}

#[test]
fn gaussian_residuals_are_standardized_errors() {
    let (spec, data, _, _) = simulated(Family::GaussianIdentity, 30, 4, 1, 1, 8);
    let result = fitted(&spec, &data, Method::Eva);
    let r = dunn_smyth_residuals(&result, &spec, &data, 1).unwrap();
    let eta = linear_predictor(&spec, &result.params, &data.x, &result.varparams.a).unwrap();
    for i in 0..spec.n {
        for j in 0..spec.m {
            let want = (data.y[(i, j)] - eta[(i, j)]) / result.params.phi_j(j);
            assert!((r[(i, j)] - want).abs() <= 1e-9 * (1.0 + want.abs()), "{} vs {want}", r[(i, j)]);
        }
    }
}

#[test]
fn discrete_residuals_depend_only_on_the_seed() {
    let (spec, data, _, _) = simulated(Family::PoissonLog, 30, 4, 1, 1, 9);
    let result = fitted(&spec, &data, Method::Eva);
    let a = dunn_smyth_residuals(&result, &spec, &data, 17).unwrap();
    let b = dunn_smyth_residuals(&result, &spec, &data, 17).unwrap();
    let c = dunn_smyth_residuals(&result, &spec, &data, 18).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.iter().all(|v| v.is_finite()));
}

#[test]
fn variance_explained_cases() {
    let spec = ModelSpec::new(Family::PoissonLog, 5, 4, 2, 0).unwrap();
    let mut null = Parameters::neutral(&spec);
    null.gamma[(2, 0)] = 0.7;
    null.gamma[(3, 1)] = -1.1;
    assert_eq!(variance_explained(&null, &null).unwrap(), 0.0);
    let mut half = null.clone();
    half.gamma *= 0.5f64.sqrt();
    assert!((variance_explained(&null, &half).unwrap() - 0.5).abs() <= 1e-12);
    let mut zero = null.clone();
    zero.gamma.fill(0.0);
    assert_eq!(variance_explained(&zero, &null), Err(Error::ZeroTrace));
}

/// When a covariate drives the shared variation, a model without it pushes
/// that variation into the loadings.
#[test]
fn covariates_explain_latent_variance() {
    let mut positive = 0;
    let reps = 20;
    for r in 0..reps {
        let spec = ModelSpec::new(Family::PoissonLog, 100, 6, 1, 1).unwrap();
        let mut truth = Parameters::neutral(&spec);
        for j in 0..spec.m {
            truth.beta0[j] = 0.5;
            truth.b[(j, 0)] = if j % 2 == 0 { 0.8 } else { -0.6 };
            truth.gamma[(j, 0)] = if j == 0 { 0.4 } else { 0.3 };
        }
        let mut rng = stream_rng(100 + r, 0);
        let x = synthetic_covariates(spec.n, 1, &mut rng);
        let sim = simulate_dataset(&spec, &truth, &x, None, &mut rng).unwrap();
        let with_cov = fitted(&spec, &sim.data, Method::Eva);
        let null_spec = ModelSpec::new(Family::PoissonLog, 100, 6, 1, 0).unwrap();
        let null_data = ResponseData::without_covariates(sim.data.y.clone()).unwrap();
        let null = fitted(&null_spec, &null_data, Method::Eva);
        if variance_explained(&null.params, &with_cov.params).unwrap() > 0.0 {
            positive += 1;
        }
    }
    assert!(positive as f64 >= 0.9 * reps as f64, "{positive}/{reps}");
}
