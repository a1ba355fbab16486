mod common;

use common::{fd_gradient, max_rel_error};
use eva_gllvm_core::init::{initialize, INTERCEPT_CAP};
use eva_gllvm_core::profile::ProfileCache;
use eva_gllvm_core::simulate::{simulate_dataset, stream_rng, synthetic_covariates, synthetic_truth};
use eva_gllvm_core::{fit, CovStructure, Family, FitConfig, Method, ModelSpec, Parameters, Problem, ResponseData, Strategy};
use nalgebra::{DMatrix, DVector};

fn simulated(family: Family, n: usize, m: usize, p: usize, q: usize, seed: u64) -> (ModelSpec, ResponseData, Parameters) {
    let spec = ModelSpec::new(family, n, m, p, q).unwrap();
    let truth = synthetic_truth(&spec, &mut stream_rng(seed, 0));
    let mut rng = stream_rng(seed, 1);
    let x = synthetic_covariates(n, q, &mut rng);
    let sim = simulate_dataset(&spec, &truth, &x, None, &mut rng).unwrap();
    (spec, sim.data, truth)
}

/// Maximum Gaussian factor-analysis log-likelihood by EM on the sample
/// covariance (mean profiled out as the sample mean).
fn factor_analysis_ml(y: &DMatrix<f64>, p: usize) -> f64 {
    let (n, m) = (y.nrows(), y.ncols());
    let mean = DVector::from_fn(m, |j, _| y.column(j).mean());
    let mut s = DMatrix::zeros(m, m);
    for i in 0..n {
        let r = y.row(i).transpose() - &mean;
        s += &r * r.transpose();
    }
    s /= n as f64;
    let loglik = |lam: &DMatrix<f64>, psi: &DVector<f64>| {
        let sigma = lam * lam.transpose() + DMatrix::from_diagonal(psi);
        let ch = sigma.cholesky().unwrap();
        let logdet: f64 = ch.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let tr = (ch.inverse() * &s).trace();
        -0.5 * n as f64 * (m as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + tr)
    };
    let mut lam = DMatrix::from_element(m, p, 0.5);
    let mut psi = s.diagonal() * 0.5;
    let mut prev = loglik(&lam, &psi);
    for _ in 0..200_000 {
        let sigma = &lam * lam.transpose() + DMatrix::from_diagonal(&psi);
        let beta = lam.transpose() * sigma.try_inverse().unwrap();
        let ezz = DMatrix::identity(p, p) - &beta * &lam + &beta * &s * beta.transpose();
        let new_lam = &s * beta.transpose() * ezz.try_inverse().unwrap();
        let new_psi = (&s - &new_lam * &beta * &s).diagonal();
        lam = new_lam;
        psi = new_psi;
        let cur = loglik(&lam, &psi);
        if (cur - prev).abs() < 1e-13 * cur.abs() {
            prev = cur;
            break;
        }
        prev = cur;
    }
    prev
}

#[test]
fn gaussian_fit_reaches_closed_form_maximum() {
    let (spec, data, _) = simulated(Family::GaussianIdentity, 50, 5, 1, 0, 11);
    let result = fit(&spec, &data, &FitConfig::default()).unwrap();
    let ml = factor_analysis_ml(&data.y, 1);
    assert!((result.objective - ml).abs() <= 1e-4, "{} vs {}", result.objective, ml);
}

#[test]
fn refitting_is_bit_identical() {
    let (spec, data, _) = simulated(Family::NegBinomialLog, 40, 5, 2, 1, 3);
    let cfg = FitConfig {
        n_starts: 2,
        seed: 9,
        ..FitConfig::default()
    };
    let a = fit(&spec, &data, &cfg).unwrap();
    let b = fit(&spec, &data, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn profiled_gradient_matches_finite_differences() {
    for (family, seed) in [(Family::NegBinomialLog, 1), (Family::BernoulliLogit, 2), (Family::TweedieLog, 3)] {
        let (spec, data, truth) = simulated(family, 15, 4, 2, 1, seed);
        for structure in [CovStructure::Full, CovStructure::Diagonal] {
            let problem = Problem::new(&spec, &data, Method::Eva, structure).unwrap();
            let mut psi = vec![0.0; problem.layout.psi_len];
            problem.layout.pack_params(&truth, &mut psi).unwrap();
            let mut cache = ProfileCache::new(&problem);
            let mut g = vec![0.0; psi.len()];
            problem.profile_value_grad(&psi, &mut g, &mut cache).unwrap();
            let base = cache.clone();
            let f = |x: &[f64]| {
                let mut c = base.clone();
                let mut scratch = vec![0.0; x.len()];
                problem.profile_value_grad(x, &mut scratch, &mut c).unwrap()
            };
            let (err, k) = max_rel_error(&g, &fd_gradient(&f, &psi));
            assert!(err <= 1e-5, "{family:?} {structure:?}: entry {k} error {err:e}");
        }
    }
}

#[test]
fn profiled_optimum_is_stationary_for_the_joint_objective() {
    let (spec, data, _) = simulated(Family::PoissonLog, 30, 5, 2, 1, 4);
    let result = fit(&spec, &data, &FitConfig::default()).unwrap();
    let g = eva_gllvm_core::fit::fitted_gradient(&result, &spec, &data).unwrap();
    let gmax = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    assert!(gmax <= 1e-3, "joint gradient {gmax:e}");
}

#[test]
fn profiled_and_joint_strategies_agree() {
    let (spec, data, _) = simulated(Family::NegBinomialLog, 30, 4, 1, 1, 5);
    let base = FitConfig {
        n_starts: 1,
        max_iter: 20_000,
        ..FitConfig::default()
    };
    let profiled = fit(&spec, &data, &base).unwrap();
    let joint = fit(
        &spec,
        &data,
        &FitConfig {
            strategy: Strategy::Joint,
            ..base
        },
    )
    .unwrap();
    assert!(
        (profiled.objective - joint.objective).abs() <= 1e-3,
        "{} vs {}",
        profiled.objective,
        joint.objective
    );
    assert!(profiled.objective >= joint.objective - 1e-6);
}

#[test]
fn fit_never_ends_below_its_start() {
    for (family, method) in [
        (Family::PoissonLog, Method::Eva),
        (Family::PoissonLog, Method::Va),
        (Family::BernoulliProbit, Method::Laplace),
        (Family::BetaLogit, Method::Eva),
    ] {
        let (spec, data, _) = simulated(family, 25, 4, 1, 1, 6);
        let cfg = FitConfig {
            method,
            n_starts: 1,
            ..FitConfig::default()
        };
        let result = fit(&spec, &data, &cfg).unwrap();
        let problem = Problem::new(&spec, &data, method, CovStructure::Full).unwrap();
        let init = initialize(&spec, &data).unwrap();
        let var = method.is_variational().then_some(&init.var);
        let theta0 = problem.layout.pack(&spec, &init.params, var).unwrap().into_inner();
        let start = problem.value(&theta0, None).unwrap().value;
        assert!(result.objective >= start, "{family:?} {method:?}: {} < {}", result.objective, start);
        result.params.validate(&spec).unwrap();
    }
}

#[test]
fn loadings_shrink_under_independence() {
    let spec = ModelSpec::new(Family::PoissonLog, 200, 5, 1, 0).unwrap();
    let mut truth = Parameters::neutral(&spec);
    truth.gamma.fill(0.0);
    let mut rng = stream_rng(21, 0);
    for j in 0..spec.m {
        truth.beta0[j] = 0.2 * j as f64;
    }
    let x = DMatrix::zeros(spec.n, 0);
    // zero scores: the loadings carry no signal
    let u = DMatrix::zeros(spec.n, spec.p);
    let sim = simulate_dataset(&spec, &with_unit_diagonal(truth), &x, Some(&u), &mut rng).unwrap();
    let result = fit(&spec, &sim.data, &FitConfig::default()).unwrap();
    let mean_abs = result.params.gamma.iter().map(|v| v.abs()).sum::<f64>() / spec.m as f64;
    assert!(mean_abs <= 0.15, "mean |gamma| = {mean_abs}");
}

/// Parameters must satisfy the positive-diagonal constraint even when the
/// scores are switched off.
fn with_unit_diagonal(mut p: Parameters) -> Parameters {
    for k in 0..p.gamma.ncols() {
        p.gamma[(k, k)] = 1.0;
    }
    p
}

#[test]
fn initialization_is_valid_and_finite_across_families() {
    let families = [
        Family::GaussianIdentity,
        Family::PoissonLog,
        Family::NegBinomialLog,
        Family::BernoulliLogit,
        Family::BernoulliProbit,
        Family::TweedieLog,
        Family::BetaLogit,
    ];
    for family in families {
        for seed in 0..100 {
            let (spec, data, _) = simulated(family, 30, 6, 2, 1, 1000 + seed);
            let init = initialize(&spec, &data).unwrap();
            init.params.validate(&spec).unwrap();
            init.var.validate(&spec).unwrap();
            let problem = Problem::new(&spec, &data, Method::Eva, CovStructure::Full).unwrap();
            let theta = problem.layout.pack(&spec, &init.params, Some(&init.var)).unwrap().into_inner();
            let v = problem.value(&theta, None).unwrap().value;
            assert!(v.is_finite(), "{family:?} seed {seed}");
        }
    }
}

#[test]
fn constant_zero_binary_column_gets_capped_intercept() {
    let (spec, mut data, _) = simulated(Family::BernoulliLogit, 40, 4, 1, 1, 8);
    for i in 0..spec.n {
        data.y[(i, 2)] = 0.0;
    }
    let init = initialize(&spec, &data).unwrap();
    assert_eq!(init.params.beta0[2], -INTERCEPT_CAP);
    assert!(init.warnings.iter().any(|w| w.contains("response 2")));
    let result = fit(&spec, &data, &FitConfig::default()).unwrap();
    assert!(result.objective.is_finite());
    assert!(result.warnings.iter().any(|w| w.contains("response 2")));
}

#[test]
fn invalid_configurations_are_rejected() {
    let (spec, data, _) = simulated(Family::TweedieLog, 10, 3, 1, 0, 9);
    let bad = [
        FitConfig {
            n_starts: 0,
            ..FitConfig::default()
        },
        FitConfig {
            grad_tol: 0.0,
            ..FitConfig::default()
        },
        FitConfig {
            method: Method::Va,
            ..FitConfig::default()
        },
    ];
    for cfg in bad {
        assert!(fit(&spec, &data, &cfg).is_err(), "{cfg:?}");
    }
}
