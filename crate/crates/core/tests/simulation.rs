use nalgebra::DVector;
use zest_core::simgen::{self, CovariateDist, EstimatorSpec, Framework, ScenarioConfig};
use zest_core::stats::{mean, variance};

fn cfg(framework: Framework, n: usize, p: usize, tau2: f64, sparsity: f64) -> ScenarioConfig {
    let mut c = ScenarioConfig::new(framework, n, p, tau2, sparsity);
    c.seed = 17;
    c
}

/// Column means of `X_j Y` with their standard errors.
fn cross_moments(framework: Framework, dist: CovariateDist, rows: usize) -> (DVector<f64>, Vec<f64>, f64, DVector<f64>) {
    let mut c = cfg(framework, rows, 10, 2.0, 0.7);
    c.k_large = Some(3);
    c.covariate_dist = dist;
    let g = simgen::generate(&c, 0).unwrap();
    let (x, y) = (g.data.x(), g.data.y());
    let mut means = DVector::zeros(10);
    let mut ses = Vec::new();
    for j in 0..10 {
        let v: Vec<f64> = (0..rows).map(|i| x[(i, j)] * y[i]).collect();
        means[j] = mean(&v);
        ses.push((variance(&v).unwrap() / rows as f64).sqrt());
    }
    (means, ses, variance(y.as_slice()).unwrap(), g.beta)
}

#[test]
fn linear_generator_moments() {
    for dist in [CovariateDist::Gaussian, CovariateDist::ExpCentered] {
        let (m, se, var_y, beta) = cross_moments(Framework::Linear, dist, 1_000_000);
        assert!((beta.norm_squared() - 2.0).abs() < 1e-12);
        for j in 0..10 {
            assert!((m[j] - beta[j]).abs() < 4.0 * se[j], "{dist:?} {j}: {} vs {}", m[j], beta[j]);
        }
        assert!((var_y / 3.0 - 1.0).abs() < 0.02, "{var_y}");
    }
}

#[test]
fn nonlinear_generator_moments() {
    let (m, se, var_y, beta) = cross_moments(Framework::Nonlinear, CovariateDist::ExpCentered, 1_000_000);
    assert!((beta.norm_squared() - 2.0).abs() < 1e-12);
    // large coefficients carry eta * tau^2 / K each
    for j in 0..3 {
        assert!((beta[j] * beta[j] - 0.7 * 2.0 / 3.0).abs() < 1e-12);
    }
    for j in 0..10 {
        assert!((m[j] - beta[j]).abs() < 4.0 * se[j], "{j}: {} vs {}", m[j], beta[j]);
    }
    assert!(var_y > 2.0 * 1.05, "{var_y}");
}

#[test]
fn kappa_closed_forms() {
    assert!((CovariateDist::Gaussian.kappa() - (-0.5f64).exp()).abs() < 1e-10);
    assert!((CovariateDist::ExpCentered.kappa() - 1f64.sin() / 2.0).abs() < 1e-10);
}

#[test]
fn thread_count_does_not_change_results() {
    use EstimatorSpec::*;
    let mut c = cfg(Framework::Nonlinear, 60, 40, 1.0, 0.5);
    c.replications = 12;
    c.bootstrap_m = 8;
    c.estimators = vec![Naive, Single, SelectionSingle, Selection, Bootstrap, Ridge];
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| serde_json::to_string(&simgen::run_scenario(&c).unwrap()).unwrap())
    };
    let one = run(1);
    assert_eq!(one, run(3));
    assert_eq!(one, run(1));
    c.seed += 1;
    let other = serde_json::to_string(&simgen::run_scenario(&c).unwrap()).unwrap();
    assert_ne!(one, other);
}

#[test]
fn summary_statistics() {
    let names = vec!["a".to_string(), "b".to_string()];
    let vals = vec![
        vec![Some(1.0), Some(3.0), Some(2.0), Some(2.0)],
        vec![Some(2.0), None, Some(2.5), Some(1.5)],
    ];
    let s = simgen::summarize(&names, 2.0, vals, vec![]);
    let a = &s.estimators[0];
    assert_eq!(a.mean, Some(2.0));
    assert_eq!(a.bias, Some(0.0));
    assert_eq!(a.mse, Some(0.5));
    assert!((a.rmse.unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
    assert!((a.se.unwrap() - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    // squared errors (1, 1, 0, 0): sd = sqrt(1/3), rmse = sqrt(1/2)
    let want = (1.0f64 / 3.0).sqrt() / (2.0 * 0.5f64.sqrt() * 2.0);
    assert!((a.rmse_se.unwrap() - want).abs() < 1e-15);
    assert_eq!(a.pct_change, Some(0.0));
    let b = &s.estimators[1];
    assert_eq!((b.n_ok, b.n_failed), (3, 1));
    assert!(s.incomplete);
    let want_pct = 100.0 * ((0.5f64 / 3.0).sqrt() - 0.5f64.sqrt()) / 0.5f64.sqrt();
    assert!((b.pct_change.unwrap() - want_pct).abs() < 1e-10);
    for e in &s.estimators {
        let r = e.n_ok as f64;
        let lhs = e.rmse.unwrap().powi(2);
        let rhs = e.bias.unwrap().powi(2) + e.se.unwrap().powi(2) * (r - 1.0) / r;
        assert!((lhs - rhs).abs() < 1e-10);
    }
    let one = simgen::summarize(&names[..1], 2.0, vec![vec![Some(2.5)]], vec![]);
    assert_eq!(one.estimators[0].se, None);
    assert_eq!(one.estimators[0].rmse, Some(0.5));
    let mut table = Vec::new();
    s.write_table_csv(&mut table).unwrap();
    let text = String::from_utf8(table).unwrap();
    assert!(text.starts_with("Estimator,Mean,SE,RMSE,RMSE_SE,PctChange,MSE,MSE_PctChange,Failed"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn complementary_estimators_across_sparsity() {
    use EstimatorSpec::*;
    let rmse = |eta: f64| {
        let mut c = cfg(Framework::Nonlinear, 300, 300, 2.0, eta);
        c.seed = 2024;
        c.estimators = vec![Naive, Single, SelectionSingle];
        let s = simgen::run_scenario(&c).unwrap();
        (s.get("single").unwrap().rmse.unwrap(), s.get("selection_single").unwrap().rmse.unwrap())
    };
    let (g_low, h_low) = rmse(0.1);
    let (g_high, h_high) = rmse(0.9);
    assert!(g_low < h_low, "{g_low} {h_low}");
    assert!(h_high < g_high, "{h_high} {g_high}");
}

#[test]
fn ridge_is_biased_low() {
    let mut c = cfg(Framework::Linear, 300, 300, 1.0, 0.05);
    c.replications = 10;
    c.estimators = vec![EstimatorSpec::Ridge];
    let s = simgen::run_scenario(&c).unwrap();
    let m = s.estimators[0].mean.unwrap();
    assert!(m > 0.0 && m < 0.5, "{m}");
}

#[test]
fn config_json() {
    let text = r#"{"framework":"nonlinear","n":50,"p":20,"replications":3,"tau2":1.0,
        "sparsity":0.5,"covariate_dist":"gaussian","estimators":["naive","single"],"seed":4}"#;
    let c = ScenarioConfig::from_json(text).unwrap();
    assert_eq!(c.k(), 6);
    assert!(c.center_response);
    let bad = text.replace("\"seed\":4", "\"seed\":4,\"sead\":5");
    assert!(ScenarioConfig::from_json(&bad).is_err());
    let err = ScenarioConfig::from_json(&text.replace("0.5", "1.5")).unwrap_err();
    assert!(err.to_string().contains("sparsity"), "{err}");
    let back = ScenarioConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
    assert_eq!(back, c);
}

#[test]
fn estimated_moments_mode_runs() {
    let mut c = cfg(Framework::Nonlinear, 80, 30, 1.0, 0.9);
    c.replications = 5;
    c.unlabeled_n = Some(2000);
    c.bandwidth = Some(2);
    c.estimators = vec![EstimatorSpec::Naive, EstimatorSpec::SelectionSingle];
    let s = simgen::run_scenario(&c).unwrap();
    assert!(!s.incomplete);
    c.var_source = zest_core::VarSource::EmpiricalUnlabeled;
    let e = simgen::run_scenario(&c).unwrap();
    assert_eq!(e.estimators[0].values, s.estimators[0].values);
}

#[test]
fn subsample_and_correlation_studies() {
    use simgen::{InitialKind, SubsampleConfig, ZeroKind};
    let d = simgen::synthetic_dataset(3000, 1).unwrap();
    assert_eq!((d.n(), d.p()), (3000, 200));
    let sc = SubsampleConfig {
        n_sub: 300,
        reps: 4,
        estimators: vec![EstimatorSpec::Naive, EstimatorSpec::Single],
        seed: 3,
        bandwidth: None,
        center_response: true,
        var_source: zest_core::VarSource::AnalyticIndependent,
        bootstrap_m: 10,
        resampling: Default::default(),
    };
    let s = simgen::subsample_study(&d, &sc).unwrap();
    assert_eq!(s.replications, 4);
    assert!(s.truth > 0.0);
    let t = simgen::correlation_study(&d, 300, 5, &[InitialKind::Naive, InitialKind::Dicker], &[ZeroKind::Single], 3, None).unwrap();
    let again = simgen::correlation_study(&d, 300, 5, &[InitialKind::Naive, InitialKind::Dicker], &[ZeroKind::Single], 3, None).unwrap();
    assert_eq!(serde_json::to_string(&t).unwrap(), serde_json::to_string(&again).unwrap());
}
