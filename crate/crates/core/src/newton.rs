//! Quasi-Newton fitting with diagonal Hessians and a Wolfe line search.
//!
//! Each sweep takes one preconditioned gradient step for the latent scores
//! and then one for all column coefficients, each with its own shared step
//! length.

use ndarray::{Array1, Array2, Axis, Zip};

use crate::data::{FitConfig, FitReport, LineSearchConfig, ModelParams, ResponseData};
use crate::error::{GmfError, Result};
use crate::exec::Exec;
use crate::fit::{self, Sweep, SweepOutcome};
use crate::pql::{self, Gauge};
use crate::scalar::Scalar;

/// Diagonal Hessian entries are raised to at least this value.
pub const DIAGONAL_FLOOR: f64 = 1e-10;

/// Result of a line search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearchOutcome<T> {
    pub step: T,
    pub value: T,
    /// Sufficient decrease holds at `step`.
    pub armijo: bool,
    /// The curvature condition holds (or could not be evaluated).
    pub curvature: bool,
    pub trials: usize,
}

/// Backtracking search for a step satisfying the Wolfe conditions.
///
/// `f(s)` returns the objective at step `s` and, when available, its
/// derivative along the direction. Steps `s₀, s₀·shrink, …` are tried in
/// turn and the first one meeting both conditions is returned. Otherwise
/// the lowest trial meeting the Armijo condition is returned, or failing
/// that the smallest step tried with `armijo` unset.
pub fn wolfe_line_search<T, F>(
    mut f: F,
    f0: T,
    df0: T,
    config: &LineSearchConfig<T>,
    initial_step: T,
) -> Result<LineSearchOutcome<T>>
where
    T: Scalar,
    F: FnMut(T) -> Result<(T, Option<T>)>,
{
    if !(df0 < T::zero()) {
        return Err(GmfError::LineSearchMisuse(df0.as_f64()));
    }
    let mut s = initial_step;
    let mut best: Option<LineSearchOutcome<T>> = None;
    let mut last = LineSearchOutcome { step: s, value: T::infinity(), armijo: false, curvature: false, trials: 0 };
    for trial in 1..=config.max_trials {
        let (value, slope) = f(s)?;
        let armijo = value.is_finite() && value <= f0 + config.c1 * s * df0;
        last = LineSearchOutcome { step: s, value, armijo, curvature: false, trials: trial };
        if armijo {
            let curvature = slope.is_none_or(|d| d.abs() <= config.c2 * df0.abs());
            if curvature {
                return Ok(LineSearchOutcome { curvature: true, ..last });
            }
            if best.is_none_or(|b| value < b.value) {
                best = Some(last);
            }
            // Still descending steeply: shorter steps will not help.
            if slope.is_some_and(|d| d < T::zero()) {
                break;
            }
        }
        s = s * config.shrink;
    }
    Ok(best.map(|b| LineSearchOutcome { trials: last.trials, ..b }).unwrap_or(last))
}

/// Replaces unobserved cells of `Y` by the current fitted means.
pub fn impute_missing<T: Scalar>(data: &ResponseData<T>, params: &ModelParams<T>) -> Result<Array2<T>> {
    let mu = pql::predict_mean(data, params)?;
    let mut y = data.y().clone();
    Zip::from(&mut y).and(data.mask()).and(&mu).for_each(|yv, &obs, &m| {
        if !obs {
            *yv = m;
        }
    });
    Ok(y)
}

/// Diagnostics from one Newton sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport<T> {
    /// Step accepted for the latent scores (`None` if the block did not move).
    pub u_step: Option<T>,
    /// Step accepted for the coefficients.
    pub coef_step: Option<T>,
    pub floor_hits: usize,
    /// Both gradients were exactly zero.
    pub stationary: bool,
}

/// One Newton sweep followed by the identifiability transform.
pub fn newton_sweep<T: Scalar>(
    data: &ResponseData<T>,
    params: &ModelParams<T>,
    config: &FitConfig<T>,
) -> Result<(ModelParams<T>, SweepReport<T>)> {
    config.validate_common()?;
    params.check_against(data)?;
    let (next, report) = sweep_blocks(data, params, config, T::one(), Exec::sequential())?;
    let gauge = Gauge::for_penalties(config.gamma_u, config.gamma_lambda);
    let out = if report.stationary {
        next
    } else {
        pql::identify::<T, rand_chacha::ChaCha8Rng>(&next, gauge, None)?.0
    };
    Ok((out, report))
}

/// Fits by Newton sweeps.
pub fn fit_newton<T: Scalar>(
    data: &ResponseData<T>,
    config: &FitConfig<T>,
    init: Option<&ModelParams<T>>,
) -> Result<(ModelParams<T>, FitReport)> {
    config.validate()?;
    fit::run(data, config, config.rank, init, &mut NewtonSweep, &mut |_| {})
}

pub(crate) struct NewtonSweep;

impl<T: Scalar> Sweep<T> for NewtonSweep {
    fn sweep(
        &mut self,
        data: &ResponseData<T>,
        params: &ModelParams<T>,
        config: &FitConfig<T>,
        step: T,
        exec: Exec,
    ) -> Result<SweepOutcome<T>> {
        let (params, report) = sweep_blocks(data, params, config, step, exec)?;
        Ok(SweepOutcome { params, floor_hits: report.floor_hits })
    }
}

fn floor_diag<T: Scalar>(h: &mut Array2<T>, hits: &mut usize) {
    let floor = T::lit(DIAGONAL_FLOOR);
    for v in h.iter_mut() {
        if !(*v >= floor) {
            *v = floor;
            *hits += 1;
        }
    }
}

fn inner<T: Scalar>(a: &Array2<T>, b: &Array2<T>) -> T {
    a.iter().zip(b.iter()).map(|(x, y)| *x * *y).sum()
}

struct Snapshot<T: Scalar> {
    eta: Array2<T>,
    objective: T,
}

fn snapshot<T: Scalar>(data: &ResponseData<T>, params: &ModelParams<T>, config: &FitConfig<T>, exec: Exec) -> Result<Snapshot<T>> {
    let eta = pql::clamp_all(data.family(), pql::eta_unclamped(data.x(), params));
    let objective = pql::data_term_from_eta(data, &eta, &params.phi, exec)
        + pql::penalty(params, config.gamma_u, config.gamma_lambda);
    if !objective.is_finite() {
        return Err(GmfError::NumericalOverflow(format!("objective evaluated to {objective}")));
    }
    Ok(Snapshot { eta, objective })
}

fn masked_residuals<T: Scalar>(data: &ResponseData<T>, eta: &Array2<T>, phi: &Array1<T>) -> Array2<T> {
    pql::scaled_residuals(data.family(), data.y(), Some(data.mask()), eta, phi)
}

fn sweep_blocks<T: Scalar>(
    data: &ResponseData<T>,
    params: &ModelParams<T>,
    config: &FitConfig<T>,
    max_step: T,
    exec: Exec,
) -> Result<(ModelParams<T>, SweepReport<T>)> {
    let family = data.family();
    let mut current = params.clone();
    let mut report = SweepReport { u_step: None, coef_step: None, floor_hits: 0, stationary: true };

    // Latent-score block.
    if current.p() > 0 {
        let snap = snapshot(data, &current, config, exec)?;
        let y_imp = impute_missing(data, &current)?;
        let resid = pql::scaled_residuals(family, &y_imp, None, &snap.eta, &current.phi);
        let grad = pql::grad_u_from_residuals(&resid, &current, config.gamma_u);
        let w = pql::weight_matrix(family, data.mask(), &snap.eta, &current.phi);
        let mut hess = w.dot(&current.lambda.mapv(|l| l * l).t()) + config.gamma_u;
        floor_diag(&mut hess, &mut report.floor_hits);
        let dir = (&grad / &hess).mapv(|v| -v);
        let df0 = inner(&grad, &dir);
        if df0 < T::zero() {
            report.stationary = false;
            let base = current.clone();
            let ls = wolfe_line_search(
                |s| {
                    let mut trial = base.clone();
                    trial.u.scaled_add(s, &dir);
                    let snap = snapshot(data, &trial, config, exec)?;
                    let r = masked_residuals(data, &snap.eta, &trial.phi);
                    let g = pql::grad_u_from_residuals(&r, &trial, config.gamma_u);
                    Ok((snap.objective, Some(inner(&g, &dir))))
                },
                snap.objective,
                df0,
                &config.line_search,
                max_step,
            )?;
            if ls.armijo {
                current.u.scaled_add(ls.step, &dir);
                report.u_step = Some(ls.step);
            }
        } else if grad.iter().any(|g| *g != T::zero()) {
            report.stationary = false;
        }
    }

    // Coefficient block at the updated scores.
    let snap = snapshot(data, &current, config, exec)?;
    let y_imp = impute_missing(data, &current)?;
    let resid = pql::scaled_residuals(family, &y_imp, None, &snap.eta, &current.phi);
    let grad = pql::grad_coef_from_residuals(&resid, data.x(), &current, config.gamma_lambda);
    let w = pql::weight_matrix(family, data.mask(), &snap.eta, &current.phi);
    let mut h0 = w.sum_axis(Axis(0)).insert_axis(Axis(0));
    let mut hb = data.x().mapv(|x| x * x).t().dot(&w);
    let mut hl = current.u.mapv(|u| u * u).t().dot(&w) + config.gamma_lambda;
    for h in [&mut h0, &mut hb, &mut hl] {
        floor_diag(h, &mut report.floor_hits);
    }
    let d0 = (&grad.beta0.view().insert_axis(Axis(0)) / &h0).mapv(|v| -v);
    let db = (&grad.b / &hb).mapv(|v| -v);
    let dl = (&grad.lambda / &hl).mapv(|v| -v);
    let g0 = grad.beta0.view().insert_axis(Axis(0)).to_owned();
    let df0 = inner(&g0, &d0) + inner(&grad.b, &db) + inner(&grad.lambda, &dl);
    if df0 < T::zero() {
        report.stationary = false;
        let base = current.clone();
        let apply = |s: T| {
            let mut trial = base.clone();
            trial.beta0.scaled_add(s, &d0.row(0));
            trial.b.scaled_add(s, &db);
            trial.lambda.scaled_add(s, &dl);
            trial
        };
        let ls = wolfe_line_search(
            |s| {
                let trial = apply(s);
                let snap = snapshot(data, &trial, config, exec)?;
                let r = masked_residuals(data, &snap.eta, &trial.phi);
                let g = pql::grad_coef_from_residuals(&r, data.x(), &trial, config.gamma_lambda);
                let slope = inner(&g.beta0.view().insert_axis(Axis(0)).to_owned(), &d0)
                    + inner(&g.b, &db)
                    + inner(&g.lambda, &dl);
                Ok((snap.objective, Some(slope)))
            },
            snap.objective,
            df0,
            &config.line_search,
            max_step,
        )?;
        if ls.armijo {
            current = apply(ls.step);
            report.coef_step = Some(ls.step);
        }
    } else if g0.iter().chain(grad.b.iter()).chain(grad.lambda.iter()).any(|g| *g != T::zero()) {
        report.stationary = false;
    }
    Ok((current, report))
}
