use mixr2::design::{build_design, parse_formula};
use mixr2::glmm::fit_glmm;
use mixr2::sim::{generate, run_study, Covariate, Measure, ReplicateKey, SimConfig, Study};
use mixr2::stats::median;

#[test]
fn logistic_random_variance_recovered() {
    let config = SimConfig::new(Study::Logistic);
    let spec = parse_formula("y ~ x1 + (1|g)").unwrap().with_family(Study::Logistic.family());
    let tau2: Vec<f64> = (0..200)
        .map(|r| {
            let data = generate(&config, 1.0, ReplicateKey { beta_index: 0, replicate: r });
            let d = build_design(&data, &spec).unwrap();
            fit_glmm(&d, &spec.family, config.nodes).unwrap().tau2
        })
        .collect();
    let med = median(&tau2).unwrap();
    assert!((med - 1.0).abs() <= 0.15, "median tau2 {med}");
}

#[test]
fn logistic_fixed_share_grows_with_effect() {
    let config = SimConfig {
        beta_grid: vec![0.0, 0.5, 1.0, 1.5, 2.0],
        replicates: 60,
        covariates: vec![Covariate::X1],
        benchmarks: false,
        ..SimConfig::new(Study::Logistic)
    };
    let res = run_study(&config).unwrap();
    let rf: Vec<f64> = config.beta_grid.iter().map(|&b| res.median(b, Covariate::X1, Measure::R2F).unwrap()).collect();
    assert!(rf.windows(2).all(|w| w[1] > w[0]), "{rf:?}");
    let rm: Vec<f64> = config.beta_grid.iter().map(|&b| res.median(b, Covariate::X1, Measure::R2M).unwrap()).collect();
    assert!(rm.iter().zip(&rf).all(|(m, f)| m >= f));
}

#[test]
fn negbin_study_runs_and_stays_in_range() {
    let config = SimConfig {
        m: 20,
        beta_grid: vec![0.0, 1.0],
        replicates: 20,
        ..SimConfig::new(Study::LoglinearNegbin)
    };
    let res = run_study(&config).unwrap();
    for row in &res.rows {
        if let Some(v) = row.median {
            assert!(v.is_finite() && v <= 1.0, "{row:?}");
        }
    }
}
