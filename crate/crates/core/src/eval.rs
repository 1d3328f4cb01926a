//! Goodness-of-fit measures, model comparison and resampling drivers.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::data::{cell_folds, holdout_split, FitConfig, ModelParams, ResponseData};
use crate::error::{GmfError, Result};
use crate::exec::{build_pool, Exec};
use crate::family::Family;
use crate::fit::{fit, fit_fixed_effects};
use crate::linalg;
use crate::pql;
use crate::scalar::Scalar;

/// `Σ unit_deviance(y, μ̂)/φ̂ⱼ` over the cells selected by `mask`.
pub fn deviance<T: Scalar>(data: &ResponseData<T>, mu_hat: &Array2<T>, phi_hat: &Array1<T>, mask: &Array2<bool>) -> Result<T> {
    let (n, m) = (data.n(), data.m());
    if mu_hat.dim() != (n, m) || mask.dim() != (n, m) || phi_hat.len() != m {
        return Err(GmfError::ShapeMismatch("deviance inputs disagree with the data shape".into()));
    }
    let family = data.family();
    let y = data.y();
    let mut total = T::zero();
    for ((i, j), &obs) in mask.indexed_iter() {
        if obs {
            total = total + family.unit_deviance(y[(i, j)], mu_hat[(i, j)])? / phi_hat[j];
        }
    }
    Ok(total)
}

/// Intercept-only means fitted on the observed cells of `data`: every row
/// of column `j` holds that column's mean, pushed inside the mean domain.
pub fn null_fit<T: Scalar>(data: &ResponseData<T>) -> Array2<T> {
    let family = data.family();
    let means: Array1<T> = (0..data.m()).map(|j| family.domain_mean(data.observed_column_mean(j))).collect();
    Array2::from_shape_fn((data.n(), data.m()), |(_, j)| means[j])
}

/// `1 − D(μ̂)/D(null)` over the cells in `mask`.
///
/// The null model is fitted on `data.mask()`, so for holdout evaluation pass
/// the training data and the test mask.
pub fn null_deviance_fraction<T: Scalar>(
    data: &ResponseData<T>,
    mu_hat: &Array2<T>,
    phi_hat: &Array1<T>,
    mask: &Array2<bool>,
) -> Result<T> {
    let d_fit = deviance(data, mu_hat, phi_hat, mask)?;
    let d_null = deviance(data, &null_fit(data), phi_hat, mask)?;
    if !(d_null > T::zero()) {
        return Err(GmfError::UndefinedFraction);
    }
    Ok(T::one() - d_fit / d_null)
}

/// `min_Ω ‖Λ₀ − ΩΛ̂‖_F` over orthogonal `Ω`, reflections included.
pub fn procrustes_error<T: Scalar>(lambda_true: &Array2<T>, lambda_hat: &Array2<T>) -> Result<T> {
    if lambda_true.dim() != lambda_hat.dim() {
        return Err(GmfError::ShapeMismatch(format!(
            "loadings of shape {:?} and {:?}",
            lambda_true.dim(),
            lambda_hat.dim()
        )));
    }
    let cross = lambda_true.dot(&lambda_hat.t());
    let (a, _, b) = linalg::svd_square(cross.view());
    let omega = a.dot(&b.t());
    let diff = lambda_true - &omega.dot(lambda_hat);
    Ok(diff.iter().map(|v| *v * *v).sum::<T>().sqrt())
}

/// `‖B₀ − B̂‖²_F / (m d)`; zero when there are no covariates.
pub fn coef_mse<T: Scalar>(b_true: &Array2<T>, b_hat: &Array2<T>) -> Result<T> {
    if b_true.dim() != b_hat.dim() {
        return Err(GmfError::ShapeMismatch(format!("coefficients of shape {:?} and {:?}", b_true.dim(), b_hat.dim())));
    }
    if b_true.is_empty() {
        return Ok(T::zero());
    }
    let ss: T = b_true.iter().zip(b_hat.iter()).map(|(a, b)| (*a - *b) * (*a - *b)).sum();
    Ok(ss / T::lit(b_true.len() as f64))
}

/// Area under the ROC curve from the Mann–Whitney statistic, with ties
/// counted as one half.
pub fn auc<T: Scalar>(labels: &[bool], scores: &[T]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(GmfError::ShapeMismatch("labels and scores differ in length".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(GmfError::UndefinedAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // Average of ranks start+1 ..= end.
        let rank = (start + end + 1) as f64 / 2.0;
        rank_sum += rank * order[start..end].iter().filter(|&&k| labels[k]).count() as f64;
        start = end;
    }
    let (np, nn) = (positives as f64, negatives as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Square roots of the diagonal of `ΛΛᵀ`, largest first.
pub fn scree_values<T: Scalar>(lambda: &Array2<T>) -> Array1<T> {
    let mut v: Vec<T> = lambda.outer_iter().map(|row| row.dot(&row).sqrt()).collect();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    Array1::from(v)
}

/// Fits one configuration; rank 0 means the fixed-effects model.
pub fn fit_any<T: Scalar>(data: &ResponseData<T>, config: &FitConfig<T>) -> Result<ModelParams<T>> {
    if config.rank == 0 {
        Ok(fit_fixed_effects(data, config)?.0)
    } else {
        Ok(fit(data, config)?.0)
    }
}

/// Mean deviance per cell over `test`, for a model fitted on `train`.
pub fn holdout_deviance<T: Scalar>(train: &ResponseData<T>, params: &ModelParams<T>, test: &Array2<bool>) -> Result<T> {
    let cells = test.iter().filter(|&&b| b).count();
    if cells == 0 {
        return Err(GmfError::InvalidInput("empty holdout mask".into()));
    }
    let mu = pql::predict_mean(train, params)?;
    Ok(deviance(train, &mu, &params.phi, test)? / T::lit(cells as f64))
}

/// One row of a cross-validation table.
#[derive(Debug, Clone, PartialEq)]
pub struct CvRow {
    pub rank: usize,
    pub gamma_u: f64,
    pub gamma_lambda: f64,
    pub method: crate::Method,
    pub mean_deviance: f64,
    /// Sample standard deviation across folds.
    pub sd_deviance: f64,
    pub fold_deviances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvTable {
    pub rows: Vec<CvRow>,
    /// Index of the row with the smallest mean holdout deviance.
    pub best: usize,
}

impl CvTable {
    /// CSV text with one line per configuration.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,gamma_u,gamma_lambda,method,mean_deviance,sd_deviance\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.rank, r.gamma_u, r.gamma_lambda, r.method, r.mean_deviance, r.sd_deviance
            ));
        }
        out
    }
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// k-fold cell-wise cross-validation over a grid of configurations.
///
/// Observed cells are partitioned into `folds` seeded folds; every
/// configuration is fitted once per fold on the remaining cells and scored
/// by mean deviance per held-out cell. A configuration with `rank` 0 fits
/// the fixed-effects model. Jobs run on `threads` workers (0 = all cores,
/// 1 = sequential); each individual fit runs sequentially, so the table
/// does not depend on the thread count.
pub fn cross_validate<T: Scalar>(
    data: &ResponseData<T>,
    grid: &[FitConfig<T>],
    folds: usize,
    seed: u64,
    threads: usize,
) -> Result<CvTable> {
    if grid.is_empty() {
        return Err(GmfError::InvalidInput("empty configuration grid".into()));
    }
    if folds < 2 {
        return Err(GmfError::InvalidInput("cross-validation needs at least 2 folds".into()));
    }
    let test_masks = cell_folds(data.mask(), folds, seed)?;
    let train_sets = test_masks
        .iter()
        .map(|test| {
            let train = Array2::from_shape_fn(test.dim(), |ij| data.mask()[ij] && !test[ij]);
            data.with_mask(train)
        })
        .collect::<Result<Vec<_>>>()?;
    let pool = if threads == 1 { None } else { Some(build_pool(threads)?) };
    let exec = Exec::on(pool.as_ref());
    let jobs = grid.len() * folds;
    let scores = exec.try_map(jobs, |job| {
        let (c, f) = (job / folds, job % folds);
        let config = FitConfig { parallel: false, ..grid[c].clone() };
        let params = fit_any(&train_sets[f], &config)?;
        holdout_deviance(&train_sets[f], &params, &test_masks[f]).map(|v| v.as_f64())
    })?;
    let mut rows = Vec::with_capacity(grid.len());
    for (c, config) in grid.iter().enumerate() {
        let fold_deviances = scores[c * folds..(c + 1) * folds].to_vec();
        let (mean_deviance, sd_deviance) = mean_sd(&fold_deviances);
        rows.push(CvRow {
            rank: config.rank,
            gamma_u: config.gamma_u.as_f64(),
            gamma_lambda: config.gamma_lambda.as_f64(),
            method: config.method,
            mean_deviance,
            sd_deviance,
            fold_deviances,
        });
    }
    let best = rows
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.mean_deviance.total_cmp(&b.1.mean_deviance))
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok(CvTable { rows, best })
}

/// Resampling scheme for [`bootstrap_refit`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BootstrapScheme<'a, T: Scalar> {
    /// Draw new responses from the fitted means of `base` and refit.
    Parametric { base: &'a ModelParams<T> },
    /// Resample rows with replacement and refit.
    RowResample,
    /// Repeated random holdout of `fraction` of the observed cells.
    CellHoldout { fraction: f64 },
}

/// Outcome of one bootstrap replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct Replicate<T: Scalar> {
    pub params: ModelParams<T>,
    /// Mean holdout deviance (cell-holdout scheme only).
    pub holdout_deviance: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct BootstrapResult<T: Scalar> {
    /// One entry per replicate; failed fits carry their error message.
    pub replicates: Vec<std::result::Result<Replicate<T>, String>>,
}

impl<T: Scalar> BootstrapResult<T> {
    pub fn successes(&self) -> impl Iterator<Item = &Replicate<T>> {
        self.replicates.iter().filter_map(|r| r.as_ref().ok())
    }

    pub fn failures(&self) -> usize {
        self.replicates.iter().filter(|r| r.is_err()).count()
    }

    /// Per-coefficient mean and standard deviation of `(β₀, B)` across the
    /// successful replicates, as `(1 + d) × m` matrices with the intercepts
    /// in the first row.
    pub fn coefficient_summary(&self) -> Option<(Array2<f64>, Array2<f64>)> {
        let stacked: Vec<Array2<f64>> = self
            .successes()
            .map(|r| {
                let mut c = Array2::zeros((1 + r.params.d(), r.params.m()));
                c.row_mut(0).assign(&r.params.beta0.mapv(|v| v.as_f64()));
                for k in 0..r.params.d() {
                    c.row_mut(k + 1).assign(&r.params.b.row(k).mapv(|v| v.as_f64()));
                }
                c
            })
            .collect();
        let first = stacked.first()?;
        let count = stacked.len() as f64;
        let mut mean = Array2::zeros(first.dim());
        for s in &stacked {
            mean += s;
        }
        mean /= count;
        let mut var = Array2::<f64>::zeros(first.dim());
        for s in &stacked {
            let d = s - &mean;
            var += &(&d * &d);
        }
        let sd = if stacked.len() > 1 { (var / (count - 1.0)).mapv(f64::sqrt) } else { var };
        Some((mean, sd))
    }

    /// Holdout deviances of the cell-holdout scheme.
    pub fn holdout_deviances(&self) -> Vec<f64> {
        self.successes().filter_map(|r| r.holdout_deviance).collect()
    }
}

fn draw_response<T: Scalar, R: Rng>(family: Family, mu: T, phi: T, rng: &mut R) -> T {
    match family {
        Family::Gaussian => {
            let z: f64 = rng.sample(StandardNormal);
            mu + T::lit(z) * phi.sqrt()
        }
        Family::Poisson => match Poisson::new(mu.as_f64()) {
            Ok(dist) => T::lit(dist.sample(rng)),
            Err(_) => T::zero(),
        },
        Family::Bernoulli => {
            if rng.random::<f64>() < mu.as_f64() {
                T::one()
            } else {
                T::zero()
            }
        }
    }
}

/// Draws a response matrix from the family at means `mu`.
pub fn sample_responses<T: Scalar, R: Rng>(family: Family, mu: &Array2<T>, phi: &Array1<T>, rng: &mut R) -> Array2<T> {
    let mut y = Array2::zeros(mu.dim());
    for ((i, j), v) in y.indexed_iter_mut() {
        *v = draw_response(family, mu[(i, j)], phi[j], rng);
    }
    y
}

fn replicate_seed(seed: u64, r: usize) -> u64 {
    seed.wrapping_add((r as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn run_replicate<T: Scalar>(
    data: &ResponseData<T>,
    config: &FitConfig<T>,
    scheme: BootstrapScheme<'_, T>,
    seed: u64,
) -> Result<Replicate<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match scheme {
        BootstrapScheme::Parametric { base } => {
            let mu = pql::predict_mean(data, base)?;
            let y = sample_responses(data.family(), &mu, &base.phi, &mut rng);
            let star = ResponseData::new(y, data.mask().clone(), data.x().clone(), data.family())?;
            Ok(Replicate { params: fit_any(&star, config)?, holdout_deviance: None })
        }
        BootstrapScheme::RowResample => {
            let rows: Vec<usize> = (0..data.n()).map(|_| rng.random_range(0..data.n())).collect();
            let y = data.y().select(Axis(0), &rows);
            let mask = data.mask().select(Axis(0), &rows);
            let x = data.x().select(Axis(0), &rows);
            let star = ResponseData::new(y, mask, x, data.family())?;
            Ok(Replicate { params: fit_any(&star, config)?, holdout_deviance: None })
        }
        BootstrapScheme::CellHoldout { fraction } => {
            let (train, test) = holdout_split(data, fraction, rng.random())?;
            let train = data.with_mask(train)?;
            let params = fit_any(&train, config)?;
            let dev = holdout_deviance(&train, &params, &test)?.as_f64();
            Ok(Replicate { params, holdout_deviance: Some(dev) })
        }
    }
}

/// Refits the model on `replicates` resampled data sets.
///
/// Individual failures are recorded in the result; if half or more of the
/// replicates fail the whole run is reported as unstable.
pub fn bootstrap_refit<T: Scalar>(
    data: &ResponseData<T>,
    config: &FitConfig<T>,
    scheme: BootstrapScheme<'_, T>,
    replicates: usize,
    seed: u64,
    threads: usize,
) -> Result<BootstrapResult<T>> {
    if replicates == 0 {
        return Err(GmfError::InvalidInput("at least one replicate is required".into()));
    }
    if let BootstrapScheme::Parametric { base } = scheme {
        base.check_against(data)?;
    }
    let pool = if threads == 1 { None } else { Some(build_pool(threads)?) };
    let exec = Exec::on(pool.as_ref());
    let inner = FitConfig { parallel: false, ..config.clone() };
    let replicates = exec.map(replicates, |r| {
        run_replicate(data, &inner, scheme, replicate_seed(seed, r)).map_err(|e| e.to_string())
    });
    let result = BootstrapResult { replicates };
    let failed = result.failures();
    if 2 * failed >= result.replicates.len() {
        return Err(GmfError::BootstrapUnstable { failed, total: result.replicates.len() });
    }
    Ok(result)
}
