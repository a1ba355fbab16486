use eva_gllvm::study::{run_study, GridPoint, StudyConfig, TruthSource};
use eva_gllvm_core::{Family, Method};

fn small(family: Family, n_grid: Vec<usize>, m_grid: Vec<usize>, reps: usize) -> StudyConfig {
    StudyConfig {
        n_replicates: reps,
        seed: 5,
        ..StudyConfig::new(family, n_grid, m_grid, 1)
    }
}

#[test]
fn gaussian_slopes_are_unbiased() {
    let cfg = StudyConfig {
        methods: vec![Method::Eva],
        m_grid: vec![5],
        inference: false,
        ..small(Family::GaussianIdentity, vec![200], vec![5], 50)
    };
    let report = run_study(&cfg).unwrap();
    let row = report.row(Method::Eva, GridPoint { n: 200, m: 5 }).unwrap();
    assert_eq!(row.failures, 0);
    assert!(row.slope_bias.abs() <= 0.02, "bias {}", row.slope_bias);
}

#[test]
fn reports_are_reproducible_and_complete() {
    let cfg = small(Family::PoissonLog, vec![30, 60], vec![4], 3);
    let a = run_study(&cfg).unwrap();
    let b = run_study(&cfg).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.rows.len(), cfg.methods.len() * 2);
    assert_eq!(a.pairs.len(), 2);
    assert_eq!(a.replicates.len(), 2 * 3 * cfg.methods.len());
    let text = String::from_utf8(a.to_csv()).unwrap();
    assert_eq!(text.lines().count(), 1 + a.rows.len());
}

#[test]
fn replicates_do_not_depend_on_execution_order() {
    let one = small(Family::PoissonLog, vec![30], vec![4], 2);
    let three = StudyConfig {
        n_replicates: 3,
        ..one.clone()
    };
    let (a, b) = (run_study(&one).unwrap(), run_study(&three).unwrap());
    for rec in &a.replicates {
        let same = b
            .replicates
            .iter()
            .find(|r| r.replicate == rec.replicate && r.method == rec.method)
            .unwrap();
        assert_eq!(rec.slopes, same.slopes);
    }
}

#[test]
fn summaries_satisfy_their_invariants() {
    for (family, seed) in [(Family::NegBinomialLog, 1), (Family::BernoulliProbit, 2), (Family::BetaLogit, 3)] {
        let cfg = StudyConfig {
            seed,
            q: 2,
            ..small(family, vec![40], vec![5], 3)
        };
        let report = run_study(&cfg).unwrap();
        for row in &report.rows {
            assert!(row.slope_rmse >= row.slope_bias.abs(), "{row:?}");
            assert!(row.intercept_rmse >= row.intercept_bias.abs(), "{row:?}");
            assert!((0.0..=1.0).contains(&row.slope_coverage), "{row:?}");
            assert!(row.procrustes_loadings >= 0.0 && row.procrustes_scores >= 0.0);
        }
    }
}

#[test]
fn invalid_configurations_are_rejected() {
    let base = small(Family::TweedieLog, vec![30], vec![4], 2);
    let bad = [
        StudyConfig {
            n_grid: vec![30, 40],
            m_grid: vec![4, 5],
            ..base.clone()
        },
        StudyConfig {
            methods: vec![Method::Va],
            ..base.clone()
        },
        StudyConfig {
            methods: vec![Method::Eva, Method::Eva],
            ..base.clone()
        },
        StudyConfig {
            n_replicates: 0,
            ..base.clone()
        },
        StudyConfig {
            n_grid: vec![],
            ..base.clone()
        },
        StudyConfig {
            truth: TruthSource::File {
                path: "/nonexistent/truth.json".into(),
            },
            ..base.clone()
        },
    ];
    for cfg in bad {
        assert!(run_study(&cfg).is_err(), "{cfg:?}");
    }
}

#[test]
fn config_parses_from_toml_with_defaults() {
    let cfg: StudyConfig = toml::from_str(
        r#"
        family = "negbinomial-log"
        n_grid = [50, 260]
        m_grid = [10]
        p = 2

        [truth]
        source = "synthetic"
        "#,
    )
    .unwrap();
    assert_eq!(cfg.n_replicates, 200);
    assert_eq!(cfg.methods, vec![Method::Eva, Method::Laplace]);
    assert_eq!(cfg.fit.n_starts, 1);
    assert!(toml::from_str::<StudyConfig>("family = \"poisson-log\"\nn_grid=[1]\nm_grid=[1]\np=1\nbogus=1\n").is_err());
}

#[test]
fn truth_file_supplies_leading_responses() {
    let spec = eva_gllvm_core::ModelSpec::new(Family::PoissonLog, 30, 6, 1, 1).unwrap();
    let truth = eva_gllvm_core::simulate::synthetic_truth(&spec, &mut eva_gllvm_core::simulate::stream_rng(8, 0));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("truth.json");
    std::fs::write(&path, serde_json::to_vec(&eva_gllvm::io::ParametersJson::from(&truth)).unwrap()).unwrap();
    let cfg = StudyConfig {
        truth: TruthSource::File { path },
        ..small(Family::PoissonLog, vec![30], vec![4], 1)
    };
    let used = cfg.truth().unwrap();
    assert_eq!(used.beta0.as_slice(), &truth.beta0.as_slice()[..4]);
    assert_eq!(run_study(&cfg).unwrap().rows.len(), 2);
}
