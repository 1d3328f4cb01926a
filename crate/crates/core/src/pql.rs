//! Penalized quasi-likelihood objective, its derivatives and the
//! identifiability transform.
//!
//! The objective minimised by both fitters is
//!
//! ```text
//! L = −Σ_obs (y_ij η_ij − b(η_ij)) / φ_j + γ_U/2 ‖U‖²_F + γ_Λ/2 ‖Λ‖²_F
//! ```
//!
//! with `η_ij = β₀ⱼ + x_iᵀβⱼ + u_iᵀλⱼ`. Missing cells contribute neither
//! score nor weight.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{ModelParams, ResponseData};
use crate::error::{GmfError, Result};
use crate::exec::Exec;
use crate::family::Family;
use crate::linalg;
use crate::scalar::Scalar;

/// Linear predictors, means, IRWLS weights and the objective at one point.
#[derive(Debug, Clone)]
pub struct WorkingState<T: Scalar> {
    pub eta: Array2<T>,
    pub mu: Array2<T>,
    /// `v(μ_ij)/φ_j` at observed cells, zero elsewhere.
    pub w: Array2<T>,
    pub objective: T,
}

/// Gradient of the objective with respect to the per-column coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefGradient<T: Scalar> {
    pub beta0: Array1<T>,
    pub b: Array2<T>,
    pub lambda: Array2<T>,
}

fn check_shapes<T: Scalar>(data: &ResponseData<T>, params: &ModelParams<T>) -> Result<()> {
    params.check_against(data)
}

/// `β₀ⱼ + x_iᵀβⱼ + u_iᵀλⱼ` without clamping.
pub(crate) fn eta_unclamped<T: Scalar>(x: &Array2<T>, params: &ModelParams<T>) -> Array2<T> {
    let mut eta = params.u.dot(&params.lambda);
    if params.d() > 0 {
        eta = eta + x.dot(&params.b);
    }
    eta + &params.beta0.view().insert_axis(Axis(0))
}

pub(crate) fn clamp_all<T: Scalar>(family: Family, mut eta: Array2<T>) -> Array2<T> {
    if family != Family::Gaussian {
        eta.mapv_inplace(|e| family.clamp_eta(e));
    }
    eta
}

/// Linear predictor matrix, clamped per the family contract.
pub fn linear_predictor<T: Scalar>(data: &ResponseData<T>, params: &ModelParams<T>) -> Result<Array2<T>> {
    check_shapes(data, params)?;
    Ok(clamp_all(data.family(), eta_unclamped(data.x(), params)))
}

/// Means `g⁻¹(η)` for every cell.
pub fn predict_mean<T: Scalar>(data: &ResponseData<T>, params: &ModelParams<T>) -> Result<Array2<T>> {
    let family = data.family();
    Ok(linear_predictor(data, params)?.mapv(|e| family.link_inverse(e)))
}

/// `−Σ_obs (yη − b(η))/φ` given clamped linear predictors.
pub(crate) fn data_term_from_eta<T: Scalar>(
    data: &ResponseData<T>,
    eta: &Array2<T>,
    phi: &Array1<T>,
    exec: Exec,
) -> T {
    let family = data.family();
    let (y, mask) = (data.y(), data.mask());
    let rows = exec.map(data.n(), |i| {
        let mut acc = T::zero();
        for j in 0..eta.ncols() {
            if mask[(i, j)] {
                let e = eta[(i, j)];
                acc = acc + (y[(i, j)] * e - family.cumulant(e)) / phi[j];
            }
        }
        acc
    });
    -rows.into_iter().sum::<T>()
}

pub(crate) fn penalty<T: Scalar>(params: &ModelParams<T>, gamma_u: T, gamma_lambda: T) -> T {
    let half = T::lit(0.5);
    let mut pen = T::zero();
    if gamma_u > T::zero() {
        pen = pen + half * gamma_u * params.u.iter().map(|v| *v * *v).sum::<T>();
    }
    if gamma_lambda > T::zero() {
        pen = pen + half * gamma_lambda * params.lambda.iter().map(|v| *v * *v).sum::<T>();
    }
    pen
}

fn finite_or_overflow<T: Scalar>(value: T) -> Result<T> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(GmfError::NumericalOverflow(format!("objective evaluated to {value}")))
    }
}

/// Negated log-quasi-likelihood over observed cells (no penalties).
pub fn data_term<T: Scalar>(data: &ResponseData<T>, params: &ModelParams<T>) -> Result<T> {
    let eta = linear_predictor(data, params)?;
    finite_or_overflow(data_term_from_eta(data, &eta, &params.phi, Exec::sequential()))
}

/// Saturated-model data term, `Σ_obs (yθ − b(θ))/φ` at `θ = g(y)`. Adding
/// it to the objective gives half the deviance plus the penalties.
pub fn saturated_term<T: Scalar>(data: &ResponseData<T>, phi: &Array1<T>) -> T {
    let family = data.family();
    let mut total = T::zero();
    for ((i, j), &y) in data.y().indexed_iter() {
        if data.mask()[(i, j)] {
            total = total + family.saturated_kernel(y) / phi[j];
        }
    }
    total
}

/// Penalized objective `L`. With `(γ_U, γ_Λ) = (1, 0)` this is the plain
/// PQL criterion; equal penalties give the regularized criterion.
pub fn pql_objective<T: Scalar>(
    data: &ResponseData<T>,
    params: &ModelParams<T>,
    gamma_u: T,
    gamma_lambda: T,
) -> Result<T> {
    pql_objective_with(data, params, gamma_u, gamma_lambda, Exec::sequential())
}

pub(crate) fn pql_objective_with<T: Scalar>(
    data: &ResponseData<T>,
    params: &ModelParams<T>,
    gamma_u: T,
    gamma_lambda: T,
    exec: Exec,
) -> Result<T> {
    check_shapes(data, params)?;
    let eta = clamp_all(data.family(), eta_unclamped(data.x(), params));
    let value = data_term_from_eta(data, &eta, &params.phi, exec) + penalty(params, gamma_u, gamma_lambda);
    finite_or_overflow(value)
}

/// Full working state at `params`.
pub fn working_state<T: Scalar>(
    data: &ResponseData<T>,
    params: &ModelParams<T>,
    gamma_u: T,
    gamma_lambda: T,
) -> Result<WorkingState<T>> {
    let eta = linear_predictor(data, params)?;
    let family = data.family();
    let mu = eta.mapv(|e| family.link_inverse(e));
    let mut w = eta.mapv(|e| family.variance_at_eta(e));
    Zip::from(w.rows_mut()).and(data.mask().rows()).for_each(|mut wr, mr| {
        for ((wv, &obs), &phi) in wr.iter_mut().zip(mr.iter()).zip(params.phi.iter()) {
            *wv = if obs { *wv / phi } else { T::zero() };
        }
    });
    let objective = finite_or_overflow(
        data_term_from_eta(data, &eta, &params.phi, Exec::sequential()) + penalty(params, gamma_u, gamma_lambda),
    )?;
    Ok(WorkingState { eta, mu, w, objective })
}

/// Scaled residuals `(y − μ)/φ_j`. With a mask, unobserved cells are zero;
/// without one every cell of `y` is used.
pub(crate) fn scaled_residuals<T: Scalar>(
    family: Family,
    y: &Array2<T>,
    mask: Option<&Array2<bool>>,
    eta: &Array2<T>,
    phi: &Array1<T>,
) -> Array2<T> {
    let mut r = Array2::zeros(eta.dim());
    for ((i, j), rv) in r.indexed_iter_mut() {
        if mask.is_none_or(|mk| mk[(i, j)]) {
            *rv = (y[(i, j)] - family.link_inverse(eta[(i, j)])) / phi[j];
        }
    }
    r
}

/// Weights `v(μ_ij)/φ_j` at observed cells, zero elsewhere.
pub(crate) fn weight_matrix<T: Scalar>(
    family: Family,
    mask: &Array2<bool>,
    eta: &Array2<T>,
    phi: &Array1<T>,
) -> Array2<T> {
    let mut w = Array2::zeros(eta.dim());
    for ((i, j), wv) in w.indexed_iter_mut() {
        if mask[(i, j)] {
            *wv = family.variance_at_eta(eta[(i, j)]) / phi[j];
        }
    }
    w
}

/// `∂L/∂U` from a residual matrix: `−R Λᵀ + γ_U U`.
pub(crate) fn grad_u_from_residuals<T: Scalar>(resid: &Array2<T>, params: &ModelParams<T>, gamma_u: T) -> Array2<T> {
    let mut g = resid.dot(&params.lambda.t());
    g.mapv_inplace(|v| -v);
    if gamma_u > T::zero() {
        g.scaled_add(gamma_u, &params.u);
    }
    g
}

pub(crate) fn grad_coef_from_residuals<T: Scalar>(
    resid: &Array2<T>,
    x: &Array2<T>,
    params: &ModelParams<T>,
    gamma_lambda: T,
) -> CoefGradient<T> {
    let beta0 = resid.sum_axis(Axis(0)).mapv(|v| -v);
    let b = x.t().dot(resid).mapv(|v| -v);
    let mut lambda = params.u.t().dot(resid).mapv(|v| -v);
    if gamma_lambda > T::zero() {
        lambda.scaled_add(gamma_lambda, &params.lambda);
    }
    CoefGradient { beta0, b, lambda }
}

/// Gradient of `L` with respect to the latent scores (one row per unit).
pub fn grad_u<T: Scalar>(data: &ResponseData<T>, params: &ModelParams<T>, gamma_u: T) -> Result<Array2<T>> {
    let eta = linear_predictor(data, params)?;
    let r = scaled_residuals(data.family(), data.y(), Some(data.mask()), &eta, &params.phi);
    Ok(grad_u_from_residuals(&r, params, gamma_u))
}

/// Gradient of `L` with respect to intercepts, coefficients and loadings.
pub fn grad_coef<T: Scalar>(
    data: &ResponseData<T>,
    params: &ModelParams<T>,
    gamma_lambda: T,
) -> Result<CoefGradient<T>> {
    let eta = linear_predictor(data, params)?;
    let r = scaled_residuals(data.family(), data.y(), Some(data.mask()), &eta, &params.phi);
    Ok(grad_coef_from_residuals(&r, data.x(), params, gamma_lambda))
}

/// Hessian of `L` in `u_i`: `Λ diag(v/φ) Λᵀ + γ_U I`.
///
/// `v_row` holds `v(μ_ij)`; pass zero at unobserved cells.
pub fn hess_u_full<T: Scalar>(lambda: ArrayView2<T>, v_row: ArrayView1<T>, phi: ArrayView1<T>, gamma_u: T) -> Array2<T> {
    let p = lambda.nrows();
    let mut h = Array2::<T>::eye(p) * gamma_u;
    for j in 0..lambda.ncols() {
        let w = v_row[j] / phi[j];
        if w == T::zero() {
            continue;
        }
        for a in 0..p {
            let la = lambda[(a, j)] * w;
            for b in 0..p {
                h[(a, b)] = h[(a, b)] + la * lambda[(b, j)];
            }
        }
    }
    h
}

/// Diagonal of [`hess_u_full`]: `(Λ∘Λ)(v/φ) + γ_U 1`.
pub fn hess_diag_u<T: Scalar>(lambda: ArrayView2<T>, v_row: ArrayView1<T>, phi: ArrayView1<T>, gamma_u: T) -> Array1<T> {
    let w: Array1<T> = Zip::from(v_row).and(phi).map_collect(|&v, &f| v / f);
    let sq = lambda.mapv(|l| l * l);
    sq.dot(&w) + gamma_u
}

/// Fisher block of one column's coefficients for the design `(1, X, U)`.
///
/// Columns of `design` from `penalized_from` onwards are the loadings and
/// receive `+γ_Λ` on the diagonal.
pub fn coef_fisher<T: Scalar>(
    design: ArrayView2<T>,
    v_col: ArrayView1<T>,
    phi_j: T,
    gamma_lambda: T,
    penalized_from: usize,
) -> Array2<T> {
    let k = design.ncols();
    let mut h = Array2::<T>::zeros((k, k));
    for (row, &v) in design.outer_iter().zip(v_col.iter()) {
        let w = v / phi_j;
        if w == T::zero() {
            continue;
        }
        for a in 0..k {
            let da = row[a] * w;
            if da == T::zero() {
                continue;
            }
            for b in a..k {
                h[(a, b)] = h[(a, b)] + da * row[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            h[(a, b)] = h[(b, a)];
        }
    }
    for a in penalized_from..k {
        h[(a, a)] = h[(a, a)] + gamma_lambda;
    }
    h
}

/// Diagonal of [`coef_fisher`]: `(Dᵀ∘Dᵀ) v/φ_j`, plus `γ_Λ` on the loadings.
pub fn hess_diag_coef<T: Scalar>(
    design: ArrayView2<T>,
    v_col: ArrayView1<T>,
    phi_j: T,
    gamma_lambda: T,
    penalized_from: usize,
) -> Array1<T> {
    let sq = design.mapv(|x| x * x);
    let mut h = sq.t().dot(&v_col) / phi_j;
    for a in penalized_from..h.len() {
        h[a] = h[a] + gamma_lambda;
    }
    h
}

/// Design `(1, X, U)` shared by every column regression.
pub fn augmented_design<T: Scalar>(x: &Array2<T>, u: &Array2<T>) -> Array2<T> {
    let (n, d, p) = (x.nrows(), x.ncols(), u.ncols());
    let mut design = Array2::<T>::zeros((n, 1 + d + p));
    design.column_mut(0).fill(T::one());
    design.slice_mut(s![.., 1..1 + d]).assign(x);
    design.slice_mut(s![.., 1 + d..]).assign(u);
    design
}

/// `½ log det(Λ diag(v/φ) Λᵀ + I)`, the Laplace term that PQL drops.
pub fn laplace_logdet<T: Scalar>(lambda: ArrayView2<T>, v_row: ArrayView1<T>, phi: ArrayView1<T>) -> T {
    let h = hess_u_full(lambda, v_row, phi, T::one());
    linalg::log_det_spd(h.view()).unwrap_or_else(T::infinity) * T::lit(0.5)
}

/// How the scale of `U` against `Λ` is fixed after each sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Gauge<T> {
    /// Sample covariance of `U` equal to the identity.
    Whiten,
    /// Scale chosen to minimise `γ_U‖U‖² + γ_Λ‖Λ‖²` for the current `UΛ`.
    Balanced { gamma_u: T, gamma_lambda: T },
}

impl<T: Scalar> Gauge<T> {
    pub fn for_penalties(gamma_u: T, gamma_lambda: T) -> Self {
        if gamma_u > T::zero() && gamma_lambda > T::zero() {
            Gauge::Balanced { gamma_u, gamma_lambda }
        } else {
            Gauge::Whiten
        }
    }
}

/// Relative eigenvalue threshold below which a latent direction counts as
/// degenerate.
const DEGENERATE_REL: f64 = 1e-12;

/// Rotates `(U, Λ)` into identified form without changing the linear
/// predictor: centred `U` with identity sample covariance, and loadings
/// upper triangular in the `p × m` layout (lower triangular as an `m × p`
/// loading matrix) with a positive leading diagonal.
pub fn identifiability_transform<T: Scalar>(params: &ModelParams<T>) -> Result<ModelParams<T>> {
    identify::<T, rand_chacha::ChaCha8Rng>(params, Gauge::Whiten, None).map(|(p, _)| p)
}

/// Shared implementation. With `repair` set, degenerate latent directions
/// are replaced by fresh centred directions with zero loadings instead of
/// raising an error; the number of replaced directions is returned.
pub(crate) fn identify<T: Scalar, R: Rng>(
    params: &ModelParams<T>,
    gauge: Gauge<T>,
    mut repair: Option<&mut R>,
) -> Result<(ModelParams<T>, usize)> {
    params.validate()?;
    let (n, p) = (params.n(), params.p());
    if p == 0 {
        return Ok((params.clone(), 0));
    }
    if n <= p {
        return Err(GmfError::InvalidInput(format!(
            "identifiability needs more rows than latent dimensions (n={n}, p={p})"
        )));
    }
    let mut out = params.clone();

    // Centre U and absorb the mean into the intercepts.
    let mean = out.u.mean_axis(Axis(0)).expect("n > 0");
    out.u = &out.u - &mean.view().insert_axis(Axis(0));
    out.beta0 = &out.beta0 + &mean.dot(&out.lambda);

    // Whiten.
    let nm1 = T::lit((n - 1) as f64);
    let cov = out.u.t().dot(&out.u) / nm1;
    let (evals, evecs) = linalg::symmetric_eigen(cov.view());
    let emax = evals[0].max(T::zero());
    let threshold = emax * T::lit(DEGENERATE_REL);
    let mut repairs = 0usize;
    let mut u0 = Array2::<T>::zeros((n, p));
    let mut lambda0 = Array2::<T>::zeros((p, params.m()));
    let mut good = Vec::with_capacity(p);
    for k in 0..p {
        let ev = evals[k];
        if ev > threshold && ev > T::zero() {
            let sd = ev.sqrt();
            let v = evecs.column(k);
            u0.column_mut(k).assign(&(out.u.dot(&v) / sd));
            lambda0.row_mut(k).assign(&(out.lambda.t().dot(&v) * sd));
            good.push(k);
        }
    }
    if good.len() < p {
        let Some(rng) = repair.as_deref_mut() else {
            return Err(GmfError::DegenerateLatent { min_eigenvalue: evals[p - 1].as_f64() });
        };
        for k in 0..p {
            if good.contains(&k) {
                continue;
            }
            let col = fresh_direction(&u0, &good, n, rng);
            u0.column_mut(k).assign(&col);
            good.push(k);
            repairs += 1;
        }
    }

    if let Gauge::Balanced { gamma_u, gamma_lambda } = gauge {
        // Rotate so the loading rows are orthogonal, then rescale each
        // direction to the penalty-minimising balance.
        let gram = lambda0.dot(&lambda0.t());
        let (svals, rot) = linalg::symmetric_eigen(gram.view());
        u0 = u0.dot(&rot);
        lambda0 = rot.t().dot(&lambda0);
        for k in 0..p {
            let s2 = svals[k].max(T::zero());
            let c = (gamma_lambda * s2 / (gamma_u * nm1)).sqrt().sqrt();
            if c > T::zero() {
                u0.column_mut(k).mapv_inplace(|v| v * c);
                lambda0.row_mut(k).mapv_inplace(|v| v / c);
            } else {
                u0.column_mut(k).fill(T::zero());
                lambda0.row_mut(k).fill(T::zero());
            }
        }
    }

    // Triangularise the loadings.
    let (q, r) = linalg::qr_positive(lambda0.view());
    out.u = u0.dot(&q);
    out.lambda = r;
    Ok((out, repairs))
}

/// Centred column of norm `√(n−1)` orthogonal to the listed columns.
fn fresh_direction<T: Scalar, R: Rng>(u0: &Array2<T>, existing: &[usize], n: usize, rng: &mut R) -> Array1<T> {
    loop {
        let mut v: Array1<T> = (0..n).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect();
        let mean = v.sum() / T::lit(n as f64);
        v.mapv_inplace(|x| x - mean);
        for _ in 0..2 {
            for &k in existing {
                let col = u0.column(k);
                let nn = col.dot(&col);
                if nn > T::zero() {
                    let proj = col.dot(&v) / nn;
                    v.scaled_add(-proj, &col);
                }
            }
        }
        let norm = v.dot(&v).sqrt();
        if norm > T::lit(1e-8) {
            let scale = T::lit(((n - 1) as f64).sqrt()) / norm;
            return v * scale;
        }
    }
}

/// Sample covariance of the rows of `U` (denominator `n − 1`).
pub fn latent_covariance<T: Scalar>(u: &Array2<T>) -> Array2<T> {
    let n = u.nrows();
    let mean = u.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(u.ncols()));
    let c = u - &mean.view().insert_axis(Axis(0));
    c.t().dot(&c) / T::lit((n.max(2) - 1) as f64)
}

/// Largest violation of the identified form: `|Cov(U) − I|`, upper entries
/// of the loading triangle and non-positive diagonal entries.
pub fn identification_error<T: Scalar>(params: &ModelParams<T>) -> (T, T, bool) {
    let p = params.p();
    let cov = latent_covariance(&params.u);
    let mut cov_err = T::zero();
    for a in 0..p {
        for b in 0..p {
            let target = if a == b { T::one() } else { T::zero() };
            cov_err = cov_err.max((cov[(a, b)] - target).abs());
        }
    }
    let mut tri_err = T::zero();
    let mut diag_positive = true;
    for k in 0..p {
        for j in 0..k.min(params.m()) {
            tri_err = tri_err.max(params.lambda[(k, j)].abs());
        }
        if k < params.m() && !(params.lambda[(k, k)] > T::zero()) {
            diag_positive = false;
        }
    }
    (cov_err, tri_err, diag_positive)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_instance(family: Family, n: usize, m: usize, d: usize, p: usize, seed: u64) -> (ResponseData<f64>, ModelParams<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = || rng.sample::<f64, _>(StandardNormal);
        let x = Array2::from_shape_fn((n, d), |_| g());
        let mut params = ModelParams::zeros(n, m, d, p);
        params.beta0.mapv_inplace(|_| 0.3 * g());
        params.b.mapv_inplace(|_| 0.3 * g());
        params.lambda.mapv_inplace(|_| 0.5 * g());
        params.u.mapv_inplace(|_| g());
        let y = Array2::from_shape_fn((n, m), |_| match family {
            Family::Gaussian => g(),
            Family::Poisson => (g().abs() * 2.0).floor(),
            Family::Bernoulli => f64::from(g() > 0.0),
        });
        let mut mask = Array2::from_elem((n, m), true);
        mask[(0, 1)] = false;
        let data = ResponseData::new(y, mask, x, family).unwrap();
        (data, params)
    }

    #[test]
    fn zero_parameters_give_zero_predictor() {
        let (data, _) = random_instance(Family::Poisson, 4, 3, 1, 2, 1);
        let params = ModelParams::zeros(4, 3, 1, 2);
        assert!(linear_predictor(&data, &params).unwrap().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn identity_loadings_give_identity_predictor() {
        let data = ResponseData::fully_observed(Array2::<f64>::zeros((2, 2)), Array2::zeros((2, 0)), Family::Gaussian).unwrap();
        let mut params = ModelParams::zeros(2, 2, 0, 2);
        params.u = Array2::eye(2);
        params.lambda = Array2::eye(2);
        assert_eq!(linear_predictor(&data, &params).unwrap(), Array2::<f64>::eye(2));
    }

    #[test]
    fn linear_predictor_matches_triple_loop() {
        let (data, params) = random_instance(Family::Gaussian, 5, 4, 2, 2, 9);
        let eta = linear_predictor(&data, &params).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                let mut e = params.beta0[j];
                for k in 0..2 {
                    e += data.x()[(i, k)] * params.b[(k, j)];
                    e += params.u[(i, k)] * params.lambda[(k, j)];
                }
                assert!((eta[(i, j)] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn objective_trivial_cases() {
        let y = Array2::zeros((3, 4));
        let data = ResponseData::fully_observed(y, Array2::zeros((3, 0)), Family::Poisson).unwrap();
        let params = ModelParams::zeros(3, 4, 0, 2);
        assert_eq!(pql_objective(&data, &params, 1.0, 0.0).unwrap(), 12.0);

        let y = array![[1.5, -2.0], [0.3, 7.0]];
        let data = ResponseData::fully_observed(y, Array2::zeros((2, 0)), Family::Gaussian).unwrap();
        let params = ModelParams::zeros(2, 2, 0, 1);
        assert_eq!(pql_objective(&data, &params, 0.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn objective_matches_direct_summation() {
        let (data, mut params) = random_instance(Family::Poisson, 6, 5, 0, 2, 4);
        params.phi = array![1.0, 1.0, 1.0, 1.0, 1.0];
        let l = pql_objective(&data, &params, 1.0, 0.0).unwrap();
        let mut direct = 0.0;
        for i in 0..6 {
            for j in 0..5 {
                if !data.mask()[(i, j)] {
                    continue;
                }
                let e = params.beta0[j] + params.u[(i, 0)] * params.lambda[(0, j)] + params.u[(i, 1)] * params.lambda[(1, j)];
                direct -= data.y()[(i, j)] * e - e.exp();
            }
            direct += 0.5 * (params.u[(i, 0)].powi(2) + params.u[(i, 1)].powi(2));
        }
        assert_relative_eq!(l, direct, max_relative = 1e-12);
    }

    #[test]
    fn gradients_vanish_when_means_match() {
        let (data, params) = random_instance(Family::Gaussian, 5, 4, 1, 2, 2);
        let mu = predict_mean(&data, &params).unwrap();
        let exact = ResponseData::new(mu, data.mask().clone(), data.x().clone(), Family::Gaussian).unwrap();
        let g = grad_u(&exact, &params, 0.0).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
        let gc = grad_coef(&exact, &params, 0.0).unwrap();
        assert!(gc.beta0.iter().chain(gc.b.iter()).chain(gc.lambda.iter()).all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn block_independence_of_row_gradients() {
        let (data, params) = random_instance(Family::Bernoulli, 6, 5, 1, 2, 8);
        let g0 = grad_u(&data, &params, 1.0).unwrap();
        let mut moved = params.clone();
        moved.u[(3, 0)] += 0.7;
        moved.u[(3, 1)] -= 0.4;
        let g1 = grad_u(&data, &moved, 1.0).unwrap();
        for i in (0..6).filter(|&i| i != 3) {
            for k in 0..2 {
                assert_eq!(g0[(i, k)], g1[(i, k)]);
            }
        }
    }

    #[test]
    fn hessian_small_cases() {
        let lambda = array![[1.0, 2.0]];
        let w = array![1.0, 1.0];
        let phi = array![1.0, 1.0];
        assert_eq!(hess_u_full(lambda.view(), w.view(), phi.view(), 1.0), array![[6.0]]);
        assert_eq!(hess_diag_u(lambda.view(), w.view(), phi.view(), 1.0), array![6.0]);
        let zero = Array2::<f64>::zeros((3, 2));
        assert_eq!(hess_u_full(zero.view(), w.view(), phi.view(), 2.5), Array2::<f64>::eye(3) * 2.5);
        assert_eq!(hess_diag_u(zero.view(), w.view(), phi.view(), 2.5), array![2.5, 2.5, 2.5]);
    }

    #[test]
    fn coefficient_hessian_small_cases() {
        // Zero design leaves only the penalty.
        let design = Array2::<f64>::zeros((3, 3));
        let v = array![1.0, 2.0, 3.0];
        assert_eq!(hess_diag_coef(design.view(), v.view(), 1.0, 0.5, 1), array![0.0, 0.5, 0.5]);
        // Two rows, one column: Σ v x² / φ.
        let design = array![[1.0], [2.0]];
        let v = array![0.5, 0.25];
        assert_eq!(hess_diag_coef(design.view(), v.view(), 2.0, 0.0, 1), array![0.75]);
        assert_eq!(coef_fisher(design.view(), v.view(), 2.0, 0.0, 1), array![[0.75]]);
    }

    #[test]
    fn laplace_logdet_cases() {
        let phi = array![1.0, 1.0];
        assert_eq!(laplace_logdet(Array2::<f64>::zeros((2, 2)).view(), array![1.0, 1.0].view(), phi.view()), 0.0);
        assert_relative_eq!(
            laplace_logdet(array![[1.0, 2.0]].view(), array![1.0, 1.0].view(), phi.view()),
            0.895_879_734_614_027_6,
            max_relative = 1e-12
        );
    }

    fn assert_identified(p: &ModelParams<f64>) {
        let (cov, tri, pos) = identification_error(p);
        assert!(cov < 1e-8, "cov error {cov}");
        assert!(tri < 1e-10, "triangle error {tri}");
        assert!(pos);
    }

    #[test]
    fn transform_identifies_and_preserves_eta() {
        let (data, params) = random_instance(Family::Poisson, 50, 7, 1, 2, 5);
        let before = linear_predictor(&data, &params).unwrap();
        let out = identifiability_transform(&params).unwrap();
        assert_identified(&out);
        let after = linear_predictor(&data, &out).unwrap();
        for (a, b) in before.iter().zip(after.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        // idempotent
        let again = identifiability_transform(&out).unwrap();
        for (a, b) in out.u.iter().zip(again.u.iter()).chain(out.lambda.iter().zip(again.lambda.iter())) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in out.beta0.iter().zip(again.beta0.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn transform_undoes_rotation() {
        let (data, params) = random_instance(Family::Gaussian, 40, 6, 0, 3, 12);
        let ident = identifiability_transform(&params).unwrap();
        let theta: f64 = 0.83;
        let (c, s) = (theta.cos(), theta.sin());
        let rot = array![[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
        let mut rotated = ident.clone();
        rotated.u = ident.u.dot(&rot);
        rotated.lambda = rot.t().dot(&ident.lambda);
        let back = identifiability_transform(&rotated).unwrap();
        assert_identified(&back);
        for (a, b) in back.lambda.iter().zip(ident.lambda.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        let e0 = linear_predictor(&data, &ident).unwrap();
        let e1 = linear_predictor(&data, &back).unwrap();
        assert!(e0.iter().zip(e1.iter()).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn degenerate_scores_are_rejected_or_repaired() {
        let (_, mut params) = random_instance(Family::Gaussian, 20, 5, 0, 2, 3);
        let col = params.u.column(0).to_owned();
        params.u.column_mut(1).assign(&(&col * 2.0));
        assert!(matches!(identifiability_transform(&params), Err(GmfError::DegenerateLatent { .. })));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (fixed, repairs) = identify(&params, Gauge::Whiten, Some(&mut rng)).unwrap();
        assert_eq!(repairs, 1);
        let (cov, tri, _) = identification_error(&fixed);
        assert!(cov < 1e-8 && tri < 1e-10);
    }

    #[test]
    fn balanced_gauge_minimises_penalty() {
        let (data, params) = random_instance(Family::Gaussian, 30, 8, 0, 3, 21);
        let (g_u, g_l) = (2.0, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (bal, _) = identify(&params, Gauge::Balanced { gamma_u: g_u, gamma_lambda: g_l }, Some(&mut rng)).unwrap();
        let e0 = linear_predictor(&data, &params).unwrap();
        let e1 = linear_predictor(&data, &bal).unwrap();
        assert!(e0.iter().zip(e1.iter()).all(|(a, b)| (a - b).abs() < 1e-10));
        let pen = penalty(&bal, g_u, g_l);
        let uu = bal.u.t().dot(&bal.u) * g_u;
        let ll = bal.lambda.dot(&bal.lambda.t()) * g_l;
        for (a, b) in uu.iter().zip(ll.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
        // Any other invertible gauge costs at least as much.
        let t = array![[1.1, 0.2, 0.0], [0.0, 0.9, 0.1], [0.3, 0.0, 1.2]];
        let tinv = linalg::invert(t.view()).unwrap();
        let mut other = bal.clone();
        other.u = bal.u.dot(&t);
        other.lambda = tinv.dot(&bal.lambda);
        assert!(penalty(&other, g_u, g_l) >= pen - 1e-10);
    }
}
