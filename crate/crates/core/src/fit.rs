//! Outer loop shared by both fitters: initialisation, step safeguard,
//! identification, dispersion refresh and the stopping rule.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::airwls::AirwlsSweep;
use crate::data::{FitConfig, FitReport, Method, ModelParams, ResponseData};
use crate::error::{GmfError, Result};
use crate::eval;
use crate::exec::{build_pool, Exec};
use crate::family::{Family, ETA_CLAMP};
use crate::newton::NewtonSweep;
use crate::pql::{self, Gauge};
use crate::scalar::Scalar;

/// Parameters after one sweep, before identification.
pub(crate) struct SweepOutcome<T: Scalar> {
    pub params: ModelParams<T>,
    pub floor_hits: usize,
}

pub(crate) trait Sweep<T: Scalar> {
    /// One full update of every block starting from `params`. `step` caps
    /// the step length; the driver halves it when a sweep fails to descend.
    fn sweep(
        &mut self,
        data: &ResponseData<T>,
        params: &ModelParams<T>,
        config: &FitConfig<T>,
        step: T,
        exec: Exec,
    ) -> Result<SweepOutcome<T>>;
}

/// State handed to an observer after every outer iteration.
///
/// Emitted after identification and before the Gaussian dispersion
/// refresh, so both parameter sets share the same dispersions.
#[derive(Debug)]
pub struct IterationEvent<'a, T: Scalar> {
    pub iteration: usize,
    /// Objective of `params` at the dispersions used during the sweep.
    pub objective: T,
    pub before_transform: &'a ModelParams<T>,
    pub params: &'a ModelParams<T>,
}

/// Fits with the method named in `config`.
pub fn fit<T: Scalar>(data: &ResponseData<T>, config: &FitConfig<T>) -> Result<(ModelParams<T>, FitReport)> {
    fit_observed(data, config, None, &mut |_| {})
}

/// Fits starting from `init` (or the default initialisation) and calls
/// `observer` after every outer iteration.
pub fn fit_observed<T: Scalar>(
    data: &ResponseData<T>,
    config: &FitConfig<T>,
    init: Option<&ModelParams<T>>,
    observer: &mut dyn FnMut(&IterationEvent<T>),
) -> Result<(ModelParams<T>, FitReport)> {
    config.validate()?;
    match config.method {
        Method::Airwls => run(data, config, config.rank, init, &mut AirwlsSweep, observer),
        Method::Newton => run(data, config, config.rank, init, &mut NewtonSweep, observer),
    }
}

/// Fits the model without latent variables (`p = 0`): one GLM per column
/// on the intercept and covariates. `config.rank` is ignored.
pub fn fit_fixed_effects<T: Scalar>(
    data: &ResponseData<T>,
    config: &FitConfig<T>,
) -> Result<(ModelParams<T>, FitReport)> {
    config.validate_common()?;
    match config.method {
        Method::Airwls => run(data, config, 0, None, &mut AirwlsSweep, &mut |_| {}),
        Method::Newton => run(data, config, 0, None, &mut NewtonSweep, &mut |_| {}),
    }
}

/// Starting values: intercepts at the link of each observed column mean,
/// zero coefficients, small seeded Gaussian scores and loadings.
pub fn initialize<T: Scalar>(data: &ResponseData<T>, rank: usize, seed: u64) -> ModelParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let family = data.family();
    let mut params = ModelParams::zeros(data.n(), data.m(), data.d(), rank);
    for j in 0..data.m() {
        params.beta0[j] = family.link(family.domain_mean(data.observed_column_mean(j)));
    }
    let mut draw = || T::lit(0.1 * rng.sample::<f64, _>(StandardNormal));
    params.u.mapv_inplace(|_| draw());
    params.lambda.mapv_inplace(|_| draw());
    params
}

fn refresh_dispersion<T: Scalar>(data: &ResponseData<T>, params: &mut ModelParams<T>) -> Result<()> {
    let family = data.family();
    let eta = pql::linear_predictor(data, params)?;
    let mu = eta.mapv(|e| family.link_inverse(e));
    for j in 0..data.m() {
        match family.estimate_dispersion(data.y().column(j), mu.column(j), data.mask().column(j)) {
            Ok(phi) => params.phi[j] = phi,
            Err(GmfError::InsufficientData(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

fn any_clamped<T: Scalar>(data: &ResponseData<T>, params: &ModelParams<T>) -> bool {
    if data.family() == Family::Gaussian {
        return false;
    }
    let limit = T::lit(ETA_CLAMP);
    let eta = pql::eta_unclamped(data.x(), params);
    eta.indexed_iter().any(|(ij, e)| data.mask()[ij] && e.abs() >= limit)
}

pub(crate) fn run<T: Scalar, S: Sweep<T>>(
    data: &ResponseData<T>,
    config: &FitConfig<T>,
    rank: usize,
    init: Option<&ModelParams<T>>,
    sweep: &mut S,
    observer: &mut dyn FnMut(&IterationEvent<T>),
) -> Result<(ModelParams<T>, FitReport)> {
    let start = Instant::now();
    data.check_coverage()?;
    let pool = if config.parallel { Some(build_pool(config.threads)?) } else { None };
    let exec = Exec::on(pool.as_ref());
    let gauge = Gauge::for_penalties(config.gamma_u, config.gamma_lambda);
    let mut repair_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let refresh = data.family() == Family::Gaussian && config.estimate_dispersion;

    let start_params = match init {
        Some(p) => {
            p.check_against(data)?;
            if p.p() != rank {
                return Err(GmfError::ShapeMismatch(format!(
                    "initial parameters have p={} but rank {rank} was requested",
                    p.p()
                )));
            }
            p.clone()
        }
        None => initialize(data, rank, config.seed),
    };
    let (mut params, mut latent_repairs) = pql::identify(&start_params, gauge, Some(&mut repair_rng))?;
    if refresh && init.is_none() {
        refresh_dispersion(data, &mut params)?;
    }
    let objective = |p: &ModelParams<T>| pql::pql_objective_with(data, p, config.gamma_u, config.gamma_lambda, exec);
    let mut current = objective(&params)?;
    let mut saturated = pql::saturated_term(data, &params.phi);
    let mut trace = vec![current.as_f64()];
    let mut converged = false;
    let mut iterations = 0;
    let mut floor_hits = 0;
    let mut step_reductions = 0;

    for iteration in 1..=config.max_iter {
        iterations = iteration;
        let mut step = T::one();
        let mut accepted = None;
        for _ in 0..=config.max_step_halvings {
            let outcome = sweep.sweep(data, &params, config, step, exec)?;
            floor_hits += outcome.floor_hits;
            let (trial, repairs) = pql::identify(&outcome.params, gauge, Some(&mut repair_rng))?;
            let value = objective(&trial).unwrap_or_else(|_| T::infinity());
            if value <= current {
                accepted = Some((outcome.params, trial, value, repairs));
                break;
            }
            step = step * T::lit(0.5);
        }
        let previous = current + saturated;
        let mut shortened = false;
        let before = match accepted {
            Some((before, trial, value, repairs)) => {
                if step < T::one() {
                    step_reductions += 1;
                    shortened = true;
                }
                latent_repairs += repairs;
                params = trial;
                current = value;
                before
            }
            None => {
                step_reductions += 1;
                params.clone()
            }
        };
        observer(&IterationEvent { iteration, objective: current, before_transform: &before, params: &params });
        if refresh {
            refresh_dispersion(data, &mut params)?;
            current = objective(&params)?;
            saturated = pql::saturated_term(data, &params.phi);
        }
        trace.push(current.as_f64());
        // Relative change measured from the saturated model, so the scale
        // does not depend on the additive constant of the objective. A
        // shortened step says nothing about stationarity.
        let value = current + saturated;
        let change = (previous - value).abs();
        let scale = value.abs();
        let relative = if scale > T::zero() { change / scale } else { change };
        if !shortened && relative < config.tol {
            converged = true;
            break;
        }
    }

    let mu = pql::predict_mean(data, &params)?;
    let deviance = eval::deviance(data, &mu, &params.phi, data.mask())?;
    let report = FitReport {
        family: data.family(),
        method: config.method,
        rank,
        gamma_u: config.gamma_u.as_f64(),
        gamma_lambda: config.gamma_lambda.as_f64(),
        tol: config.tol.as_f64(),
        seed: config.seed,
        objective_trace: trace,
        iterations,
        converged,
        wall_time_secs: start.elapsed().as_secs_f64(),
        scree: eval::scree_values(&params.lambda).iter().map(|v| v.as_f64()).collect(),
        deviance: deviance.as_f64(),
        diagonal_floor_hits: floor_hits,
        step_reductions,
        clamp_hits: any_clamped(data, &params),
        latent_repairs,
    };
    Ok((params, report))
}

