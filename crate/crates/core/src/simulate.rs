//! Synthetic data from a known GLLVM.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{ModelParams, ResponseData};
use crate::error::{GmfError, Result};
use crate::eval::sample_responses;
use crate::family::Family;
use crate::linalg;
use crate::pql;
use crate::scalar::Scalar;

/// Dimensions and distributions of a simulated data set.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSpec {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub d: usize,
    pub family: Family,
    /// Covariance of the rows of `X` (identity when `None`).
    pub sigma_x: Option<Array2<f64>>,
    /// Covariance of the columns of `Λ` (identity when `None`).
    pub sigma_lambda: Option<Array2<f64>>,
    /// Common intercept `β₀ⱼ`.
    pub intercept: f64,
    pub seed: u64,
}

impl SimulationSpec {
    pub fn new(n: usize, m: usize, p: usize, d: usize, family: Family, seed: u64) -> Self {
        Self { n, m, p, d, family, sigma_x: None, sigma_lambda: None, intercept: 0.0, seed }
    }
}

fn gaussian_rows<R: Rng>(count: usize, sigma: Option<&Array2<f64>>, dim: usize, rng: &mut R) -> Result<Array2<f64>> {
    let chol = match sigma {
        Some(s) => {
            if s.dim() != (dim, dim) {
                return Err(GmfError::ShapeMismatch(format!("covariance must be {dim}×{dim}, got {:?}", s.dim())));
            }
            linalg::cholesky(s.view()).ok_or(GmfError::NonSpd)?
        }
        None => Array2::eye(dim),
    };
    let z = Array2::from_shape_fn((count, dim), |_| rng.sample::<f64, _>(StandardNormal));
    Ok(z.dot(&chol.t()))
}

/// Simulates responses and returns them with the identified true
/// parameters. `X` rows and `Λ` columns are Gaussian with the given
/// covariances, `U` and `B` are standard normal, dispersions are 1 and
/// every cell is observed.
pub fn simulate_dataset<T: Scalar>(spec: &SimulationSpec) -> Result<(ResponseData<T>, ModelParams<T>)> {
    let SimulationSpec { n, m, p, d, family, .. } = *spec;
    if n <= p || m == 0 {
        return Err(GmfError::InvalidInput(format!("simulation needs n > p and m ≥ 1 (n={n}, m={m}, p={p})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let x = gaussian_rows(n, spec.sigma_x.as_ref(), d, &mut rng)?;
    let lambda = gaussian_rows(m, spec.sigma_lambda.as_ref(), p, &mut rng)?.reversed_axes();
    let u = Array2::from_shape_fn((n, p), |_| rng.sample::<f64, _>(StandardNormal));
    let b = Array2::from_shape_fn((d, m), |_| rng.sample::<f64, _>(StandardNormal));

    let lit = |a: &Array2<f64>| a.mapv(T::lit);
    let truth = ModelParams {
        beta0: Array1::from_elem(m, T::lit(spec.intercept)),
        b: lit(&b),
        lambda: lit(&lambda),
        u: lit(&u),
        phi: Array1::ones(m),
    };
    let x = lit(&x);
    let eta = pql::clamp_all(family, pql::eta_unclamped(&x, &truth));
    let mu = eta.mapv(|e| family.link_inverse(e));
    let y = sample_responses(family, &mu, &truth.phi, &mut rng);
    let data = ResponseData::fully_observed(y, x, family)?;
    let truth = if p > 0 { pql::identifiability_transform(&truth)? } else { truth };
    Ok((data, truth))
}
