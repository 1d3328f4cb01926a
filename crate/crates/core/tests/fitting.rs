use gmf_core::data::holdout_split;
use gmf_core::eval::{
    bootstrap_refit, cross_validate, fit_any, holdout_deviance, null_deviance_fraction, scree_values, BootstrapScheme,
};
use gmf_core::pql::{data_term, identifiability_transform, laplace_logdet, linear_predictor, predict_mean};
use gmf_core::simulate::{simulate_dataset, SimulationSpec};
use gmf_core::{fit, fit_fixed_effects, Family, FitConfig, FitConfig32, Method, ModelParams64, ResponseData, ResponseData32, ResponseData64};
use ndarray::{array, Array1, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn sim(n: usize, m: usize, p: usize, family: Family, seed: u64) -> (ResponseData64, ModelParams64) {
    simulate_dataset(&SimulationSpec::new(n, m, p, 0, family, seed)).unwrap()
}

/// Noiseless Gaussian data of exact rank 2 on top of column intercepts.
fn noiseless_rank_two(n: usize, m: usize, seed: u64) -> ResponseData64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |r, c| Array2::from_shape_fn((r, c), |_| StandardNormal.sample(&mut rng));
    let u: Array2<f64> = draw(n, 2);
    let lambda: Array2<f64> = draw(2, m);
    let y = u.dot(&lambda) + 1.0;
    ResponseData::fully_observed(y, Array2::zeros((n, 0)), Family::Gaussian).unwrap()
}

fn sequential<T: gmf_core::Scalar>(method: Method, rank: usize) -> FitConfig<T> {
    FitConfig { parallel: false, ..FitConfig::new(method, rank) }
}

#[test]
fn ants_sized_poisson_fit_explains_most_deviance() {
    let (data, _) = sim(30, 41, 2, Family::Poisson, 3);
    for method in [Method::Airwls, Method::Newton] {
        let (params, report) = fit(&data, &sequential(method, 2)).unwrap();
        assert!(report.converged, "{method} did not converge");
        let mu = predict_mean(&data, &params).unwrap();
        let fraction = null_deviance_fraction(&data, &mu, &params.phi, data.mask()).unwrap();
        assert!(fraction > 0.5 && fraction < 0.95, "{method}: fraction {fraction}");
    }
}

#[test]
fn fitted_models_are_rotation_invariant() {
    let (data, _) = sim(40, 30, 2, Family::Poisson, 8);
    let (params, _) = fit(&data, &sequential(Method::Airwls, 2)).unwrap();
    let eta = linear_predictor(&data, &params).unwrap();
    proptest!(ProptestConfig::with_cases(32), |(theta in 0.0f64..6.3, reflect in any::<bool>())| {
        let (s, c) = theta.sin_cos();
        let mut omega = array![[c, -s], [s, c]];
        if reflect {
            omega.column_mut(1).mapv_inplace(|v| -v);
        }
        let rotated = ModelParams64 {
            u: params.u.dot(&omega),
            lambda: omega.t().dot(&params.lambda),
            ..params.clone()
        };
        let back = identifiability_transform(&rotated).unwrap();
        let moved = (&linear_predictor(&data, &back).unwrap() - &eta).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        prop_assert!(moved < 1e-10);
        let lambda_gap = (&back.lambda - &params.lambda).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let u_gap = (&back.u - &params.u).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        prop_assert!(lambda_gap < 1e-8 && u_gap < 1e-8, "gaps {} {}", lambda_gap, u_gap);
    });
}

#[test]
fn laplace_term_shrinks_relative_to_data_term() {
    let mut ratios = Vec::new();
    for m in [20, 60, 200] {
        let (data, truth) = sim(100, m, 2, Family::Poisson, 21);
        let mu = predict_mean(&data, &truth).unwrap();
        let logdet: f64 = (0..data.n())
            .map(|i| laplace_logdet(truth.lambda.view(), mu.row(i), truth.phi.view()))
            .sum();
        ratios.push(logdet / data_term(&data, &truth).unwrap().abs());
    }
    assert!(ratios.windows(2).all(|w| w[1] < w[0]), "ratios {ratios:?}");
}

/// Under the identity-covariance design the third scree value stays above
/// half the second in about half of the seeds, so this does not hold.
#[test]
#[ignore]
fn scree_shows_gap_above_true_rank() {
    let mut gaps = 0;
    for seed in 0..10 {
        let (data, _) = sim(100, 100, 2, Family::Poisson, 40 + seed);
        let config = FitConfig { seed, tol: 1e-6, max_iter: 3000, ..sequential(Method::Airwls, 6).with_equal_gamma(60.0) };
        let (params, _) = fit(&data, &config).unwrap();
        let scree = scree_values(&params.lambda);
        if scree[2] < 0.5 * scree[1] {
            gaps += 1;
        }
    }
    assert!(gaps > 5, "gap visible in {gaps} of 10 seeds");
}

#[test]
fn penalty_shrinks_spurious_scree_values() {
    let (data, _) = sim(100, 100, 2, Family::Poisson, 43);
    let tail = |gamma: f64| {
        let config = FitConfig { tol: 1e-6, max_iter: 3000, ..sequential(Method::Airwls, 6).with_equal_gamma(gamma) };
        let scree = scree_values(&fit(&data, &config).unwrap().0.lambda);
        scree.iter().skip(2).sum::<f64>() / (scree[0] + scree[1])
    };
    let (weak, strong) = (tail(5.0), tail(60.0));
    assert!(strong < 0.6 * weak, "tail share {weak} at γ=5, {strong} at γ=60");
}

#[test]
fn vanishing_loadings_leave_only_fixed_effects() {
    let mut spec = SimulationSpec::new(100, 60, 2, 2, Family::Poisson, 6);
    spec.sigma_lambda = Some(Array2::eye(2) * 1e-12);
    let (data, _): (ResponseData64, ModelParams64) = simulate_dataset(&spec).unwrap();
    let (train, test) = holdout_split(&data, 0.2, 1).unwrap();
    let train = data.with_mask(train).unwrap();
    let config = sequential(Method::Airwls, 2);
    let full = holdout_deviance(&train, &fit(&train, &config).unwrap().0, &test).unwrap();
    let fixed = holdout_deviance(&train, &fit_fixed_effects(&train, &config).unwrap().0, &test).unwrap();
    assert!(fixed <= 1.01 * full, "fixed effects {fixed} vs full {full}");
}

#[test]
fn cross_validation_is_deterministic() {
    let (data, _) = sim(30, 20, 2, Family::Poisson, 2);
    let grid: Vec<FitConfig<f64>> = (0..=2).map(|p| sequential(Method::Airwls, p)).collect();
    let a = cross_validate(&data, &grid, 4, 9, 1).unwrap();
    let b = cross_validate(&data, &grid, 4, 9, 1).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), 3);
    assert!(a.rows.iter().all(|r| r.mean_deviance.is_finite() && r.fold_deviances.len() == 4));
    let single = cross_validate(&data, &grid[1..2], 3, 9, 1).unwrap();
    assert_eq!(single.rows.len(), 1);
    assert_eq!(single.best, 0);
}

#[test]
fn cross_validation_finds_noiseless_rank() {
    let data = noiseless_rank_two(40, 25, 5);
    // Unit dispersion, so the holdout deviance is the squared error rather
    // than a ratio against a vanishing residual variance.
    let grid: Vec<FitConfig<f64>> = (1..=3)
        .map(|p| FitConfig { tol: 1e-8, max_iter: 2000, estimate_dispersion: false, ..sequential(Method::Airwls, p) })
        .collect();
    let table = cross_validate(&data, &grid, 5, 3, 1).unwrap();
    let best = table.rows[table.best].mean_deviance;
    assert_ne!(table.rows[table.best].rank, 1);
    assert!(table.rows[0].mean_deviance > best + 1e-6, "{:?}", table.to_csv());
}

#[test]
fn parametric_bootstrap_is_deterministic() {
    let (data, _) = sim(30, 20, 2, Family::Poisson, 12);
    let config = sequential(Method::Airwls, 2);
    let (base, _) = fit(&data, &config).unwrap();
    let scheme = BootstrapScheme::Parametric { base: &base };
    let a = bootstrap_refit(&data, &config, scheme, 1, 4, 1).unwrap();
    let b = bootstrap_refit(&data, &config, scheme, 1, 4, 1).unwrap();
    assert_eq!(a.replicates.len(), 1);
    assert_eq!(a.replicates, b.replicates);
}

#[test]
fn noiseless_bootstrap_has_no_spread() {
    let data = noiseless_rank_two(40, 15, 9);
    let config = FitConfig { tol: 1e-8, max_iter: 2000, ..sequential(Method::Airwls, 2) };
    let (base, _) = fit(&data, &config).unwrap();
    let result = bootstrap_refit(&data, &config, BootstrapScheme::Parametric { base: &base }, 20, 1, 1).unwrap();
    assert_eq!(result.failures(), 0);
    let (_, sd) = result.coefficient_summary().unwrap();
    let worst = sd.iter().fold(0.0f64, |a, &v| a.max(v));
    assert!(worst < 1e-3, "largest coefficient sd {worst}");
}

#[test]
fn bootstrap_spread_shrinks_with_more_rows() {
    let spread = |n: usize| {
        let (data, _) = sim(n, 100, 2, Family::Poisson, 31);
        let config = FitConfig { tol: 1e-6, max_iter: 3000, ..sequential(Method::Airwls, 2) };
        let (base, _) = fit(&data, &config).unwrap();
        let result = bootstrap_refit(&data, &config, BootstrapScheme::Parametric { base: &base }, 10, 2, 1).unwrap();
        let (_, sd) = result.coefficient_summary().unwrap();
        sd.row(0).mean().unwrap()
    };
    let (small, large) = (spread(100), spread(200));
    assert!(large < small, "mean intercept sd {small} at n=100, {large} at n=200");
}

#[test]
fn cell_holdout_bootstrap_reports_deviances() {
    let (data, _) = sim(30, 20, 2, Family::Bernoulli, 13);
    let config = sequential(Method::Newton, 2);
    let result = bootstrap_refit(&data, &config, BootstrapScheme::CellHoldout { fraction: 0.1 }, 4, 7, 1).unwrap();
    let devs = result.holdout_deviances();
    assert_eq!(devs.len(), 4 - result.failures());
    assert!(devs.iter().all(|d| d.is_finite() && *d >= 0.0));
    let rows = bootstrap_refit(&data, &config, BootstrapScheme::RowResample, 3, 7, 1).unwrap();
    assert!(rows.successes().count() >= 2);
}

#[test]
fn single_precision_fit_runs() {
    let (data, _): (ResponseData32, _) = simulate_dataset::<f32>(&SimulationSpec::new(60, 40, 2, 1, Family::Poisson, 1)).unwrap();
    for method in [Method::Airwls, Method::Newton] {
        let config: FitConfig32 = sequential(method, 2);
        let (params, report) = fit(&data, &config).unwrap();
        assert!(report.iterations > 0);
        let mu = predict_mean(&data, &params).unwrap();
        let fraction = null_deviance_fraction(&data, &mu, &params.phi, data.mask()).unwrap();
        assert!(fraction > 0.3, "{method}: fraction {fraction}");
        assert!(params.u.iter().all(|v| v.is_finite()));
    }
}

/// Newton iterations for a one-covariate Poisson regression.
fn poisson_glm(x: &[f64], y: &[f64]) -> (f64, f64) {
    let (mut a, mut b) = (0.0, 0.0);
    for _ in 0..100 {
        let (mut g0, mut g1, mut h00, mut h01, mut h11) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&xi, &yi) in x.iter().zip(y) {
            let mu = (a + b * xi).exp();
            g0 += yi - mu;
            g1 += (yi - mu) * xi;
            h00 += mu;
            h01 += mu * xi;
            h11 += mu * xi * xi;
        }
        let det = h00 * h11 - h01 * h01;
        a += (h11 * g0 - h01 * g1) / det;
        b += (h00 * g1 - h01 * g0) / det;
    }
    (a, b)
}

#[test]
fn fixed_effect_fit_matches_poisson_glm() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 400;
    let x: Array2<f64> = Array2::from_shape_fn((n, 1), |_| StandardNormal.sample(&mut rng));
    let beta0 = array![0.5, -0.3];
    let b = array![[0.8, -0.4]];
    let mu = (x.dot(&b) + &beta0.view().insert_axis(ndarray::Axis(0))).mapv(f64::exp);
    let y = gmf_core::eval::sample_responses(Family::Poisson, &mu, &Array1::ones(2), &mut rng);
    let data = ResponseData::fully_observed(y.clone(), x.clone(), Family::Poisson).unwrap();
    let config = FitConfig { rank: 0, tol: 1e-12, max_iter: 1000, ..sequential(Method::Airwls, 1) };
    let params = fit_any(&data, &config).unwrap();
    let xs = x.column(0).to_vec();
    for j in 0..2 {
        let (a, slope) = poisson_glm(&xs, &y.column(j).to_vec());
        assert!((params.beta0[j] - a).abs() < 1e-6, "column {j}: {} vs {a}", params.beta0[j]);
        assert!((params.b[(0, j)] - slope).abs() < 1e-6, "column {j}: {} vs {slope}", params.b[(0, j)]);
    }
}
