//! Alternating penalized IRWLS: a ridge IRWLS step for every row's latent
//! scores followed by an IRWLS step for every column's coefficients.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};

use crate::data::{FitConfig, FitReport, ModelParams, ResponseData};
use crate::error::{GmfError, Result};
use crate::exec::Exec;
use crate::family::Family;
use crate::fit::{self, Sweep, SweepOutcome};
use crate::linalg;
use crate::pql;
use crate::scalar::Scalar;

/// Weights below this are raised before the working response is formed.
pub const WEIGHT_FLOOR: f64 = 1e-10;

fn floored_weight<T: Scalar>(family: Family, eta: T, phi: T) -> T {
    family.variance_at_eta(eta).max(T::lit(WEIGHT_FLOOR)) / phi
}

/// One penalized IRWLS step for a single row's latent scores.
///
/// Solves `(Λ W Λᵀ + γ_U I) u = Λ W z` with working response
/// `z = Λᵀu_old + W⁻¹(y − μ)/φ` over observed cells, then moves
/// `step` of the way from `u_old` to the solution.
#[allow(clippy::too_many_arguments)]
pub fn row_update<T: Scalar>(
    family: Family,
    y_row: ArrayView1<T>,
    mask_row: ArrayView1<bool>,
    lambda: ArrayView2<T>,
    phi: ArrayView1<T>,
    eta_offset_row: ArrayView1<T>,
    u_old: ArrayView1<T>,
    gamma_u: T,
    step: T,
) -> Result<Array1<T>> {
    let (p, m) = lambda.dim();
    let mut hess = Array2::<T>::eye(p) * gamma_u;
    let mut rhs = Array1::<T>::zeros(p);
    for j in 0..m {
        if !mask_row[j] {
            continue;
        }
        let lam = lambda.column(j);
        let eta = family.clamp_eta(eta_offset_row[j] + lam.dot(&u_old));
        let w = floored_weight(family, eta, phi[j]);
        let z = lam.dot(&u_old) + (y_row[j] - family.link_inverse(eta)) / (w * phi[j]);
        for a in 0..p {
            let wa = w * lam[a];
            rhs[a] = rhs[a] + wa * z;
            for b in 0..p {
                hess[(a, b)] = hess[(a, b)] + wa * lam[b];
            }
        }
    }
    let (target, _) = linalg::solve_spd_jittered(hess.view(), rhs.view()).ok_or(GmfError::RidgeSingular)?;
    Ok(&u_old + &((&target - &u_old) * step))
}

/// One IRWLS step for a single column on the design `(1, X, U)`.
///
/// `coef_old` is ordered as `(β₀ⱼ, βⱼ, λⱼ)`; only the loadings, which start
/// at `penalized_from`, carry the `γ_Λ` ridge.
#[allow(clippy::too_many_arguments)]
pub fn col_update<T: Scalar>(
    family: Family,
    column: usize,
    y_col: ArrayView1<T>,
    mask_col: ArrayView1<bool>,
    design: ArrayView2<T>,
    phi_j: T,
    coef_old: ArrayView1<T>,
    gamma_lambda: T,
    penalized_from: usize,
    step: T,
) -> Result<Array1<T>> {
    let k = design.ncols();
    let mut fisher = Array2::<T>::zeros((k, k));
    let mut rhs = Array1::<T>::zeros(k);
    for (i, row) in design.outer_iter().enumerate() {
        if !mask_col[i] {
            continue;
        }
        let lin = row.dot(&coef_old);
        let eta = family.clamp_eta(lin);
        let w = floored_weight(family, eta, phi_j);
        let z = lin + (y_col[i] - family.link_inverse(eta)) / (w * phi_j);
        for a in 0..k {
            let wa = w * row[a];
            if wa == T::zero() {
                continue;
            }
            rhs[a] = rhs[a] + wa * z;
            for b in a..k {
                fisher[(a, b)] = fisher[(a, b)] + wa * row[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            fisher[(a, b)] = fisher[(b, a)];
        }
    }
    for a in penalized_from..k {
        fisher[(a, a)] = fisher[(a, a)] + gamma_lambda;
    }
    let (target, _) =
        linalg::solve_spd_jittered(fisher.view(), rhs.view()).ok_or(GmfError::ColumnDegenerate(column))?;
    Ok(&coef_old + &((&target - &coef_old) * step))
}

/// Fits by alternating IRWLS sweeps.
pub fn fit_airwls<T: Scalar>(
    data: &ResponseData<T>,
    config: &FitConfig<T>,
    init: Option<&ModelParams<T>>,
) -> Result<(ModelParams<T>, FitReport)> {
    config.validate()?;
    fit::run(data, config, config.rank, init, &mut AirwlsSweep, &mut |_| {})
}

pub(crate) struct AirwlsSweep;

impl<T: Scalar> Sweep<T> for AirwlsSweep {
    fn sweep(
        &mut self,
        data: &ResponseData<T>,
        params: &ModelParams<T>,
        config: &FitConfig<T>,
        step: T,
        exec: Exec,
    ) -> Result<SweepOutcome<T>> {
        let objective = |p: &ModelParams<T>| {
            pql::pql_objective_with(data, p, config.gamma_u, config.gamma_lambda, exec).unwrap_or_else(|_| T::infinity())
        };
        let mut next = params.clone();
        let mut base = objective(params);
        if params.p() > 0 {
            let mut s = step;
            for _ in 0..=config.max_step_halvings {
                let mut trial = next.clone();
                trial.u = row_sweep(data, params, config.gamma_u, s, exec)?;
                let value = objective(&trial);
                if value <= base {
                    next = trial;
                    base = value;
                    break;
                }
                s = s * T::lit(0.5);
            }
        }
        let mut s = step;
        for _ in 0..=config.max_step_halvings {
            let mut trial = next.clone();
            col_sweep(data, &mut trial, params, config.gamma_lambda, s, exec)?;
            if objective(&trial) <= base {
                next = trial;
                break;
            }
            s = s * T::lit(0.5);
        }
        Ok(SweepOutcome { params: next, floor_hits: 0 })
    }
}

/// Latent-score update for every row against the frozen loadings.
pub(crate) fn row_sweep<T: Scalar>(
    data: &ResponseData<T>,
    params: &ModelParams<T>,
    gamma_u: T,
    step: T,
    exec: Exec,
) -> Result<Array2<T>> {
    let mut offset = Array2::zeros((data.n(), data.m()));
    if params.d() > 0 {
        offset = data.x().dot(&params.b);
    }
    let offset = offset + &params.beta0.view().insert_axis(ndarray::Axis(0));
    let rows = exec.try_map(data.n(), |i| {
        row_update(
            data.family(),
            data.y().row(i),
            data.mask().row(i),
            params.lambda.view(),
            params.phi.view(),
            offset.row(i),
            params.u.row(i),
            gamma_u,
            step,
        )
    })?;
    let mut u = Array2::zeros(params.u.dim());
    for (i, r) in rows.into_iter().enumerate() {
        u.row_mut(i).assign(&r);
    }
    Ok(u)
}

/// Coefficient update for every column against the scores in `next.u`,
/// starting from the coefficients in `old`.
fn col_sweep<T: Scalar>(
    data: &ResponseData<T>,
    next: &mut ModelParams<T>,
    old: &ModelParams<T>,
    gamma_lambda: T,
    step: T,
    exec: Exec,
) -> Result<()> {
    let (d, p) = (old.d(), old.p());
    let design = pql::augmented_design(data.x(), &next.u);
    let cols = exec.try_map(data.m(), |j| {
        let mut coef = Array1::zeros(1 + d + p);
        coef[0] = old.beta0[j];
        coef.slice_mut(s![1..1 + d]).assign(&old.b.column(j));
        coef.slice_mut(s![1 + d..]).assign(&old.lambda.column(j));
        col_update(
            data.family(),
            j,
            data.y().column(j),
            data.mask().column(j),
            design.view(),
            old.phi[j],
            coef.view(),
            gamma_lambda,
            1 + d,
            step,
        )
    })?;
    for (j, c) in cols.into_iter().enumerate() {
        next.beta0[j] = c[0];
        next.b.column_mut(j).assign(&c.slice(s![1..1 + d]));
        next.lambda.column_mut(j).assign(&c.slice(s![1 + d..]));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn normal(rng: &mut ChaCha8Rng) -> f64 {
        rng.sample(StandardNormal)
    }

    #[test]
    fn gaussian_row_update_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (p, m) = (2, 6);
        let lambda = Array2::from_shape_fn((p, m), |_| normal(&mut rng));
        let y = Array1::from_shape_fn(m, |_| normal(&mut rng));
        let off = Array1::from_shape_fn(m, |_| normal(&mut rng));
        let mask = Array1::from_elem(m, true);
        let phi = Array1::ones(m);
        let u_old = array![0.3, -0.2];
        let u = row_update(Family::Gaussian, y.view(), mask.view(), lambda.view(), phi.view(), off.view(), u_old.view(), 0.7, 1.0).unwrap();
        // gradient of the row objective vanishes
        let resid = &y - &(&off + &lambda.t().dot(&u));
        let g = -lambda.dot(&resid) + &u * 0.7;
        assert!(g.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn zero_loadings_shrink_toward_zero() {
        let lambda = Array2::<f64>::zeros((2, 3));
        let y = array![1.0, 2.0, 0.0];
        let off = Array1::zeros(3);
        let mask = Array1::from_elem(3, true);
        let phi = Array1::ones(3);
        let u_old = array![0.8, -1.2];
        let u = row_update(Family::Poisson, y.view(), mask.view(), lambda.view(), phi.view(), off.view(), u_old.view(), 1.0, 0.25).unwrap();
        assert_relative_eq!(u[0], 0.75 * 0.8, max_relative = 1e-14);
        assert_relative_eq!(u[1], 0.75 * -1.2, max_relative = 1e-14);
    }

    #[test]
    fn poisson_row_update_decreases_row_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (p, m) = (2, 8);
        let lambda = Array2::from_shape_fn((p, m), |_| 0.5 * normal(&mut rng));
        let y = Array1::from_shape_fn(m, |_| (2.0 * normal(&mut rng).abs()).floor());
        let off = Array1::from_elem(m, 0.2);
        let mask = Array1::from_shape_fn(m, |j| j != 3);
        let phi = Array1::ones(m);
        let u_old = array![1.5, -1.0];
        let row_obj = |u: &Array1<f64>| {
            let mut v = 0.5 * u.dot(u);
            for j in 0..m {
                if mask[j] {
                    let e = off[j] + lambda.column(j).dot(u);
                    v -= y[j] * e - e.exp();
                }
            }
            v
        };
        let u = row_update(Family::Poisson, y.view(), mask.view(), lambda.view(), phi.view(), off.view(), u_old.view(), 1.0, 1.0).unwrap();
        assert!(row_obj(&u) < row_obj(&u_old));
    }

    #[test]
    fn unpenalized_singular_row_is_reported() {
        let lambda = Array2::<f64>::zeros((1, 2));
        let v = array![0.0, 1.0];
        let mask = array![true, true];
        let phi = array![1.0, 1.0];
        let r = row_update(Family::Gaussian, v.view(), mask.view(), lambda.view(), phi.view(), v.view(), array![0.0].view(), 0.0, 1.0);
        assert!(matches!(r, Err(GmfError::RidgeSingular)));
    }

    #[test]
    fn gaussian_col_update_is_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 12;
        let x = Array2::from_shape_fn((n, 1), |_| normal(&mut rng));
        let u = Array2::from_shape_fn((n, 2), |_| normal(&mut rng));
        let design = pql::augmented_design(&x, &u);
        let y = Array1::from_shape_fn(n, |_| normal(&mut rng));
        let mask = Array1::from_elem(n, true);
        let coef = col_update(Family::Gaussian, 0, y.view(), mask.view(), design.view(), 1.0, Array1::zeros(4).view(), 0.0, 2, 1.0).unwrap();
        let score = design.t().dot(&(&y - &design.dot(&coef)));
        assert!(score.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn poisson_col_update_matches_scalar_glm_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 15;
        let design = Array2::from_shape_fn((n, 3), |(_, k)| if k == 0 { 1.0 } else { normal(&mut rng) });
        let y = Array1::from_shape_fn(n, |_| (1.5 * normal(&mut rng).abs()).floor());
        let mask = Array1::from_elem(n, true);
        let beta = array![0.1, 0.2, -0.1];
        let coef = col_update(Family::Poisson, 0, y.view(), mask.view(), design.view(), 1.0, beta.view(), 0.0, 1, 1.0).unwrap();
        // Newton step on the Poisson log-likelihood written out by hand.
        let mut info = [[0.0f64; 3]; 3];
        let mut score = [0.0f64; 3];
        for i in 0..n {
            let e: f64 = (0..3).map(|k| design[(i, k)] * beta[k]).sum();
            let mu = e.exp();
            for a in 0..3 {
                score[a] += design[(i, a)] * (y[i] - mu);
                for b in 0..3 {
                    info[a][b] += mu * design[(i, a)] * design[(i, b)];
                }
            }
        }
        let info = Array2::from_shape_fn((3, 3), |(a, b)| info[a][b]);
        let delta = linalg::solve_spd(info.view(), Array1::from(score.to_vec()).view()).unwrap();
        for k in 0..3 {
            assert!((coef[k] - (beta[k] + delta[k])).abs() < 1e-8);
        }
    }

    #[test]
    fn all_zero_bernoulli_column_stays_finite() {
        let n = 10;
        let design = Array2::from_elem((n, 1), 1.0);
        let y = Array1::<f64>::zeros(n);
        let mask = Array1::from_elem(n, true);
        let mut coef = array![0.0];
        for _ in 0..50 {
            coef = col_update(Family::Bernoulli, 0, y.view(), mask.view(), design.view(), 1.0, coef.view(), 0.0, 1, 1.0).unwrap();
            assert!(coef[0].is_finite());
        }
        assert!(coef[0] < -20.0);
    }
}
