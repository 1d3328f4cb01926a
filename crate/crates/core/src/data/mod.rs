//! Response/covariate containers, parameter sets, fit configuration and
//! their on-disk formats.

mod csv_io;
mod model_file;
mod split;

pub use csv_io::{load_csv_matrix, load_mask_csv, parse_csv_matrix, write_csv_matrix, write_mask_csv};
pub use model_file::{load_model, save_model, MODEL_FORMAT_VERSION};
pub use split::{cell_folds, holdout_split};

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{GmfError, Result};
use crate::family::Family;
use crate::scalar::Scalar;

/// Observed responses, their observation mask and the covariates.
///
/// Cells with a cleared mask bit are missing; their `y` value is ignored.
#[derive(Debug, Clone)]
pub struct ResponseData<T: Scalar> {
    y: Array2<T>,
    mask: Array2<bool>,
    x: Array2<T>,
    family: Family,
}

impl<T: Scalar> ResponseData<T> {
    /// Builds a data set, checking shapes, response validity at observed
    /// cells and that no covariate column is constant.
    pub fn new(y: Array2<T>, mask: Array2<bool>, x: Array2<T>, family: Family) -> Result<Self> {
        let (n, m) = y.dim();
        if n == 0 || m == 0 {
            return Err(GmfError::EmptyInput("response matrix has no cells".into()));
        }
        if mask.dim() != (n, m) {
            return Err(GmfError::ShapeMismatch(format!(
                "mask is {:?} but responses are {:?}",
                mask.dim(),
                (n, m)
            )));
        }
        if x.nrows() != n {
            return Err(GmfError::ShapeMismatch(format!(
                "covariates have {} rows but responses have {n}",
                x.nrows()
            )));
        }
        for ((i, j), &obs) in mask.indexed_iter() {
            if obs {
                family.check_response(y[(i, j)]).map_err(|e| match e {
                    GmfError::InvalidResponse { family, y } => GmfError::InvalidInput(format!(
                        "response {y} at row {i}, column {j} is invalid for the {family} family"
                    )),
                    other => other,
                })?;
            }
        }
        if n > 1 {
            for (k, col) in x.axis_iter(Axis(1)).enumerate() {
                if col.iter().any(|v| !v.is_finite()) {
                    return Err(GmfError::InvalidInput(format!("covariate column {k} has non-finite values")));
                }
                let first = col[0];
                if col.iter().all(|&v| v == first) {
                    return Err(GmfError::InvalidInput(format!(
                        "covariate column {k} is constant; the intercept is added automatically"
                    )));
                }
            }
        }
        Ok(Self { y, mask, x, family })
    }

    /// Fully observed data set.
    pub fn fully_observed(y: Array2<T>, x: Array2<T>, family: Family) -> Result<Self> {
        let mask = Array2::from_elem(y.dim(), true);
        Self::new(y, mask, x, family)
    }

    /// Same responses and covariates under a different observation mask.
    pub fn with_mask(&self, mask: Array2<bool>) -> Result<Self> {
        Self::new(self.y.clone(), mask, self.x.clone(), self.family)
    }

    pub fn y(&self) -> &Array2<T> {
        &self.y
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.mask
    }

    pub fn x(&self) -> &Array2<T> {
        &self.x
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn m(&self) -> usize {
        self.y.ncols()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    #[inline]
    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.mask[(i, j)]
    }

    /// Fitting needs at least one observed cell in every row and column.
    pub fn check_coverage(&self) -> Result<()> {
        if let Some(i) = self.mask.axis_iter(Axis(0)).position(|r| !r.iter().any(|&b| b)) {
            return Err(GmfError::InsufficientData(format!("row {i} has no observed cells")));
        }
        if let Some(j) = self.mask.axis_iter(Axis(1)).position(|c| !c.iter().any(|&b| b)) {
            return Err(GmfError::InsufficientData(format!("column {j} has no observed cells")));
        }
        Ok(())
    }

    /// Mean of the observed cells of column `j` (zero when none are observed).
    pub fn observed_column_mean(&self, j: usize) -> T {
        let mut sum = T::zero();
        let mut count = 0usize;
        for i in 0..self.n() {
            if self.mask[(i, j)] {
                sum = sum + self.y[(i, j)];
                count += 1;
            }
        }
        if count == 0 {
            T::zero()
        } else {
            sum / T::lit(count as f64)
        }
    }
}

/// Intercepts, coefficients, loadings, latent scores and dispersions.
///
/// Loadings are stored as a `p × m` matrix whose column `j` is `λⱼ`; the
/// identified form has `lambda[(k, j)] = 0` for `j < k` and a positive
/// leading diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Scalar> {
    pub beta0: Array1<T>,
    pub b: Array2<T>,
    pub lambda: Array2<T>,
    pub u: Array2<T>,
    pub phi: Array1<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// All-zero parameters with unit dispersions.
    pub fn zeros(n: usize, m: usize, d: usize, p: usize) -> Self {
        Self {
            beta0: Array1::zeros(m),
            b: Array2::zeros((d, m)),
            lambda: Array2::zeros((p, m)),
            u: Array2::zeros((n, p)),
            phi: Array1::ones(m),
        }
    }

    pub fn n(&self) -> usize {
        self.u.nrows()
    }

    pub fn m(&self) -> usize {
        self.beta0.len()
    }

    pub fn d(&self) -> usize {
        self.b.nrows()
    }

    /// Latent dimension.
    pub fn p(&self) -> usize {
        self.lambda.nrows()
    }

    /// Checks internal shape agreement and positivity of the dispersions.
    pub fn validate(&self) -> Result<()> {
        let (m, p) = (self.m(), self.p());
        if self.b.ncols() != m || self.lambda.ncols() != m || self.phi.len() != m {
            return Err(GmfError::ShapeMismatch(format!(
                "parameter column counts disagree (beta0 {m}, B {}, Λ {}, φ {})",
                self.b.ncols(),
                self.lambda.ncols(),
                self.phi.len()
            )));
        }
        if self.u.ncols() != p {
            return Err(GmfError::ShapeMismatch(format!(
                "U has {} columns but Λ has {p} rows",
                self.u.ncols()
            )));
        }
        if self.phi.iter().any(|&f| !(f > T::zero())) {
            return Err(GmfError::InvalidInput("dispersions must be positive".into()));
        }
        Ok(())
    }

    /// Checks that the parameters fit a data set's dimensions.
    pub fn check_against(&self, data: &ResponseData<T>) -> Result<()> {
        self.validate()?;
        if self.n() != data.n() || self.m() != data.m() || self.d() != data.d() {
            return Err(GmfError::ShapeMismatch(format!(
                "parameters are for n={}, m={}, d={} but data has n={}, m={}, d={}",
                self.n(),
                self.m(),
                self.d(),
                data.n(),
                data.m(),
                data.d()
            )));
        }
        Ok(())
    }
}

/// Fitting algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Alternating penalized IRWLS over rows and columns.
    Airwls,
    /// Quasi-Newton with diagonal Hessians and Wolfe line search.
    Newton,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Airwls => "airwls",
            Method::Newton => "newton",
        })
    }
}

impl FromStr for Method {
    type Err = GmfError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "airwls" => Ok(Method::Airwls),
            "newton" => Ok(Method::Newton),
            other => Err(GmfError::InvalidInput(format!("unknown method `{other}`"))),
        }
    }
}

/// Wolfe line-search constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearchConfig<T> {
    pub c1: T,
    pub c2: T,
    pub shrink: T,
    pub max_trials: usize,
}

impl<T: Scalar> Default for LineSearchConfig<T> {
    fn default() -> Self {
        Self { c1: T::lit(1e-4), c2: T::lit(0.9), shrink: T::lit(0.5), max_trials: 30 }
    }
}

/// Everything that controls a single fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig<T> {
    pub method: Method,
    /// Latent dimension `p`.
    pub rank: usize,
    /// Ridge penalty on the latent scores.
    pub gamma_u: T,
    /// Ridge penalty on the loadings.
    pub gamma_lambda: T,
    /// Relative objective change that stops the outer loop.
    pub tol: T,
    pub max_iter: usize,
    pub line_search: LineSearchConfig<T>,
    /// Number of step halvings tried when a sweep increases the objective.
    pub max_step_halvings: usize,
    pub seed: u64,
    /// Run row and column sweeps on the thread pool.
    pub parallel: bool,
    /// Pool size; 0 uses every available core.
    pub threads: usize,
    /// Re-estimate Gaussian dispersions after every iteration. When false,
    /// the dispersions of the initial parameters are kept (1 by default).
    pub estimate_dispersion: bool,
}

impl<T: Scalar> Default for FitConfig<T> {
    fn default() -> Self {
        Self {
            method: Method::Airwls,
            rank: 2,
            gamma_u: T::one(),
            gamma_lambda: T::zero(),
            tol: T::lit(1e-3),
            max_iter: 500,
            line_search: LineSearchConfig::default(),
            max_step_halvings: 10,
            seed: 0,
            parallel: true,
            threads: 0,
            estimate_dispersion: true,
        }
    }
}

impl<T: Scalar> FitConfig<T> {
    pub fn new(method: Method, rank: usize) -> Self {
        Self { method, rank, ..Self::default() }
    }

    /// Equal penalties on scores and loadings.
    pub fn with_equal_gamma(mut self, gamma: T) -> Self {
        self.gamma_u = gamma;
        self.gamma_lambda = gamma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank < 1 {
            return Err(GmfError::InvalidInput("rank ≥ 1 is required".into()));
        }
        self.validate_common()
    }

    pub(crate) fn validate_common(&self) -> Result<()> {
        if !(self.tol > T::zero()) {
            return Err(GmfError::InvalidInput("tolerance must be positive".into()));
        }
        if !(self.gamma_u >= T::zero()) || !(self.gamma_lambda >= T::zero()) {
            return Err(GmfError::InvalidInput("penalties must be non-negative".into()));
        }
        let ls = &self.line_search;
        if !(ls.c1 > T::zero() && ls.c1 < ls.c2 && ls.c2 < T::one()) {
            return Err(GmfError::InvalidInput("line search needs 0 < c1 < c2 < 1".into()));
        }
        if !(ls.shrink > T::zero() && ls.shrink < T::one()) || ls.max_trials == 0 {
            return Err(GmfError::InvalidInput("line search shrink must lie in (0, 1)".into()));
        }
        if self.max_iter == 0 {
            return Err(GmfError::InvalidInput("max_iter must be positive".into()));
        }
        Ok(())
    }
}

/// Summary of a fit: objective trace, convergence and diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub family: Family,
    pub method: Method,
    pub rank: usize,
    pub gamma_u: f64,
    pub gamma_lambda: f64,
    pub tol: f64,
    pub seed: u64,
    /// Objective after initialisation followed by one value per iteration.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub wall_time_secs: f64,
    /// Sorted square roots of diag(ΛΛᵀ).
    pub scree: Vec<f64>,
    /// Deviance over the observed training cells.
    pub deviance: f64,
    /// Diagonal Hessian entries raised to the floor (Newton only).
    #[serde(default)]
    pub diagonal_floor_hits: usize,
    /// Iterations whose full sweep had to be shortened or rejected.
    #[serde(default)]
    pub step_reductions: usize,
    /// Linear predictors ran into the clamp (possible separation).
    #[serde(default)]
    pub clamp_hits: bool,
    /// Degenerate latent directions that were re-seeded.
    #[serde(default)]
    pub latent_repairs: usize,
}
