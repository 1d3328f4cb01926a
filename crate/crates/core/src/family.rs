//! Exponential-family kernels with canonical links.

use std::fmt;
use std::str::FromStr;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::error::{GmfError, Result};
use crate::scalar::Scalar;

/// Linear predictors are clamped to `[-ETA_CLAMP, ETA_CLAMP]` for the Poisson
/// and Bernoulli families before the inverse link is evaluated.
pub const ETA_CLAMP: f64 = 30.0;

/// Lower bound applied to estimated dispersions.
pub const DISPERSION_FLOOR: f64 = 1e-8;

/// Response distribution together with its canonical link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Gaussian responses, identity link, free dispersion.
    Gaussian,
    /// Poisson counts, log link.
    Poisson,
    /// Presence/absence responses, logit link.
    Bernoulli,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Gaussian, Family::Poisson, Family::Bernoulli];

    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Poisson => "poisson",
            Family::Bernoulli => "bernoulli",
        }
    }

    /// Poisson and Bernoulli have φ = 1 by definition.
    pub fn dispersion_fixed(self) -> bool {
        !matches!(self, Family::Gaussian)
    }

    /// Clamps a linear predictor into the range where the inverse link is
    /// safe to evaluate. The identity link is left alone.
    #[inline]
    pub fn clamp_eta<T: Scalar>(self, eta: T) -> T {
        match self {
            Family::Gaussian => eta,
            _ => {
                let c = T::lit(ETA_CLAMP);
                eta.max(-c).min(c)
            }
        }
    }

    /// Inverse canonical link `g⁻¹(η)`.
    #[inline]
    pub fn link_inverse<T: Scalar>(self, eta: T) -> T {
        match self {
            Family::Gaussian => eta,
            Family::Poisson => eta.exp(),
            Family::Bernoulli => logistic(eta),
        }
    }

    /// Canonical link `g(μ)`. Callers keep `μ` inside the mean domain.
    #[inline]
    pub fn link<T: Scalar>(self, mu: T) -> T {
        match self {
            Family::Gaussian => mu,
            Family::Poisson => mu.ln(),
            Family::Bernoulli => (mu / (T::one() - mu)).ln(),
        }
    }

    /// Variance function `v(μ)`, rejecting means outside the domain.
    pub fn variance<T: Scalar>(self, mu: T) -> Result<T> {
        self.check_mean(mu)?;
        Ok(match self {
            Family::Gaussian => T::one(),
            Family::Poisson => mu,
            Family::Bernoulli => mu * (T::one() - mu),
        })
    }

    /// `v(g⁻¹(η))`, evaluated without forming `μ` first. For the logit link
    /// this avoids the cancellation in `μ(1 − μ)` near saturation.
    #[inline]
    pub fn variance_at_eta<T: Scalar>(self, eta: T) -> T {
        match self {
            Family::Gaussian => T::one(),
            Family::Poisson => eta.exp(),
            Family::Bernoulli => {
                let e = (-eta.abs()).exp();
                let d = T::one() + e;
                e / (d * d)
            }
        }
    }

    /// Cumulant function `b(η)`.
    #[inline]
    pub fn cumulant<T: Scalar>(self, eta: T) -> T {
        match self {
            Family::Gaussian => eta * eta * T::lit(0.5),
            Family::Poisson => eta.exp(),
            Family::Bernoulli => eta.max(T::zero()) + (-eta.abs()).exp().ln_1p(),
        }
    }

    /// Kernel `yθ − b(θ)` of the saturated model, where `θ = g(y)`.
    pub fn saturated_kernel<T: Scalar>(self, y: T) -> T {
        match self {
            Family::Gaussian => y * y * T::lit(0.5),
            Family::Poisson if y > T::zero() => y * y.ln() - y,
            Family::Poisson => T::zero(),
            Family::Bernoulli => T::zero(),
        }
    }

    /// Checks that a response value is admissible for the family.
    pub fn check_response<T: Scalar>(self, y: T) -> Result<()> {
        let ok = y.is_finite()
            && match self {
                Family::Gaussian => true,
                Family::Poisson => y >= T::zero(),
                Family::Bernoulli => y == T::zero() || y == T::one(),
            };
        if ok {
            Ok(())
        } else {
            Err(GmfError::InvalidResponse { family: self.name(), y: y.as_f64() })
        }
    }

    fn check_mean<T: Scalar>(self, mu: T) -> Result<()> {
        let ok = mu.is_finite()
            && match self {
                Family::Gaussian => true,
                Family::Poisson => mu > T::zero(),
                Family::Bernoulli => mu > T::zero() && mu < T::one(),
            };
        if ok {
            Ok(())
        } else {
            Err(GmfError::InvalidMean { family: self.name(), mu: mu.as_f64() })
        }
    }

    /// Unit deviance `d(y, μ) = 2[log f(y | y) − log f(y | μ)]` with φ = 1.
    ///
    /// The saturated point `μ = y` is accepted even on the boundary of the
    /// mean domain and gives zero.
    pub fn unit_deviance<T: Scalar>(self, y: T, mu: T) -> Result<T> {
        self.check_response(y)?;
        if mu == y {
            return Ok(T::zero());
        }
        self.check_mean(mu)?;
        Ok(self.unit_deviance_unchecked(y, mu))
    }

    #[inline]
    pub(crate) fn unit_deviance_unchecked<T: Scalar>(self, y: T, mu: T) -> T {
        let two = T::lit(2.0);
        match self {
            Family::Gaussian => (y - mu) * (y - mu),
            Family::Poisson => {
                let ylog = if y > T::zero() { y * (y / mu).ln() } else { T::zero() };
                (two * (ylog - (y - mu))).max(T::zero())
            }
            Family::Bernoulli => {
                if y > T::zero() {
                    -two * mu.ln()
                } else {
                    -two * (-mu).ln_1p()
                }
            }
        }
    }

    /// Moment estimate of the dispersion for one column.
    ///
    /// Fixed-dispersion families return 1. The Gaussian estimate is the
    /// Pearson statistic over observed cells divided by their count, floored
    /// at [`DISPERSION_FLOOR`].
    pub fn estimate_dispersion<T: Scalar>(
        self,
        y_col: ArrayView1<T>,
        mu_col: ArrayView1<T>,
        mask_col: ArrayView1<bool>,
    ) -> Result<T> {
        let observed = mask_col.iter().filter(|&&b| b).count();
        if observed < 2 {
            return Err(GmfError::InsufficientData(format!(
                "dispersion needs at least 2 observed cells, found {observed}"
            )));
        }
        if self.dispersion_fixed() {
            return Ok(T::one());
        }
        let mut pearson = T::zero();
        for ((&y, &mu), &obs) in y_col.iter().zip(mu_col.iter()).zip(mask_col.iter()) {
            if obs {
                let r = y - mu;
                pearson = pearson + r * r / self.variance(mu)?;
            }
        }
        Ok((pearson / T::lit(observed as f64)).max(T::lit(DISPERSION_FLOOR)))
    }

    /// Mean used for intercept initialisation and the null model: the column
    /// mean pushed strictly inside the mean domain.
    pub(crate) fn domain_mean<T: Scalar>(self, mean: T) -> T {
        match self {
            Family::Gaussian => mean,
            Family::Poisson => mean.max(T::lit(1e-4)),
            Family::Bernoulli => mean.max(T::lit(1e-4)).min(T::lit(1.0 - 1e-4)),
        }
    }
}

#[inline]
fn logistic<T: Scalar>(eta: T) -> T {
    if eta >= T::zero() {
        T::one() / (T::one() + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (T::one() + e)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = GmfError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" => Ok(Family::Gaussian),
            "poisson" => Ok(Family::Poisson),
            "bernoulli" | "binomial" => Ok(Family::Bernoulli),
            other => Err(GmfError::UnsupportedFamily(other.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn inverse_link_examples() {
        assert_eq!(Family::Poisson.link_inverse(0.0), 1.0);
        assert_eq!(Family::Bernoulli.link_inverse(0.0), 0.5);
        assert_eq!(Family::Gaussian.link_inverse(1.3), 1.3);
    }

    #[test]
    fn variance_examples() {
        assert_eq!(Family::Bernoulli.variance(0.5).unwrap(), 0.25);
        assert_eq!(Family::Poisson.variance(2.0).unwrap(), 2.0);
        assert_eq!(Family::Gaussian.variance(-7.2).unwrap(), 1.0);
        assert!(matches!(Family::Poisson.variance(0.0), Err(GmfError::InvalidMean { .. })));
        assert!(matches!(Family::Bernoulli.variance(1.0), Err(GmfError::InvalidMean { .. })));
    }

    #[test]
    fn cumulant_examples() {
        assert_eq!(Family::Poisson.cumulant(0.0), 1.0);
        assert_relative_eq!(Family::Bernoulli.cumulant(0.0), 2f64.ln(), max_relative = 1e-15);
        assert_eq!(Family::Gaussian.cumulant(2.0), 2.0);
        // overflow safety
        assert_relative_eq!(Family::Bernoulli.cumulant(800.0), 800.0);
        assert!(Family::Bernoulli.cumulant(-800.0) >= 0.0);
    }

    #[test]
    fn unit_deviance_examples() {
        assert_eq!(Family::Poisson.unit_deviance(2.0, 2.0).unwrap(), 0.0);
        // 2(2 ln 2 − 1)
        assert_relative_eq!(
            Family::Poisson.unit_deviance(2.0, 1.0).unwrap(),
            0.772_588_722_239_781,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            Family::Bernoulli.unit_deviance(1.0, 0.5).unwrap(),
            1.386_294_361_119_890_6,
            max_relative = 1e-12
        );
        assert_eq!(Family::Poisson.unit_deviance(0.0, 1.5).unwrap(), 3.0);
        assert!(matches!(
            Family::Bernoulli.unit_deviance(0.5, 0.5),
            Err(GmfError::InvalidResponse { .. })
        ));
        assert!(Family::Poisson.unit_deviance(-1.0, 0.5).is_err());
    }

    #[test]
    fn dispersion_examples() {
        let all = array![true, true, true];
        assert_eq!(
            Family::Poisson
                .estimate_dispersion(array![0.0, 3.0, 1.0].view(), array![1.0, 1.0, 1.0].view(), all.view())
                .unwrap(),
            1.0
        );
        let phi = Family::Gaussian
            .estimate_dispersion(array![1.0, 2.0, 3.0].view(), array![1.0, 2.0, 3.0].view(), all.view())
            .unwrap();
        assert_eq!(phi, DISPERSION_FLOOR);
        let phi = Family::Gaussian
            .estimate_dispersion(array![0.0, 2.0].view(), array![1.0, 1.0].view(), array![true, true].view())
            .unwrap();
        assert_eq!(phi, 1.0);
        let short = Family::Gaussian.estimate_dispersion(
            array![0.0, 2.0].view(),
            array![1.0, 1.0].view(),
            array![true, false].view(),
        );
        assert!(matches!(short, Err(GmfError::InsufficientData(_))));
    }

    #[test]
    fn family_tokens_parse() {
        assert_eq!("gaussian".parse::<Family>().unwrap(), Family::Gaussian);
        assert_eq!("poisson".parse::<Family>().unwrap(), Family::Poisson);
        assert_eq!("bernoulli".parse::<Family>().unwrap(), Family::Bernoulli);
        assert!(matches!("gamma".parse::<Family>(), Err(GmfError::UnsupportedFamily(_))));
    }

    #[test]
    fn canonical_identity_on_grid() {
        // b''(η) by central differences equals v(g⁻¹(η)).
        for family in Family::ALL {
            let mut eta: f64 = -20.0;
            while eta <= 20.0 {
                let h = 1e-3;
                let b = |e: f64| family.cumulant(e);
                let second = (b(eta + h) - 2.0 * b(eta) + b(eta - h)) / (h * h);
                let v = family.variance(family.link_inverse(eta)).unwrap_or(0.0);
                let v_eta = family.variance_at_eta(eta);
                assert_relative_eq!(v, v_eta, max_relative = 1e-6, epsilon = 1e-300);
                if v > 1e-2 {
                    assert_relative_eq!(second, v, max_relative = 1e-6);
                }
                eta += 0.25;
            }
        }
    }

    #[test]
    fn inverse_link_strictly_increasing() {
        for family in Family::ALL {
            let mut prev = family.link_inverse(-20.0);
            let mut eta = -19.9;
            while eta <= 20.0 {
                let cur = family.link_inverse(eta);
                assert!(cur > prev, "{family} not increasing at {eta}");
                prev = cur;
                eta += 0.1;
            }
        }
    }

    #[test]
    fn deviance_matches_density_difference() {
        fn ln_fact(k: u32) -> f64 {
            (1..=k).map(|i| (i as f64).ln()).sum()
        }
        let pois = |y: f64, mu: f64| y * mu.ln() - mu - ln_fact(y as u32);
        for &(y, mu) in &[(0.0, 0.7), (3.0, 1.2), (7.0, 9.5), (1.0, 1.0)] {
            let sat = if y > 0.0 { pois(y, y) } else { 0.0 };
            let direct = 2.0 * (sat - pois(y, mu));
            let d: f64 = Family::Poisson.unit_deviance(y, mu).unwrap();
            assert!((d - direct).abs() < 1e-10);
        }
        let bern = |y: f64, mu: f64| y * mu.ln() + (1.0 - y) * (1.0 - mu).ln();
        for &(y, mu) in &[(0.0, 0.3), (1.0, 0.3), (1.0, 0.999)] {
            let direct = -2.0 * bern(y, mu);
            let d: f64 = Family::Bernoulli.unit_deviance(y, mu).unwrap();
            assert!((d - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn bernoulli_deviance_decreases_toward_label() {
        let mut prev = f64::INFINITY;
        for k in 1..60 {
            let mu = 1.0 - 0.5f64.powi(k).max(1e-12);
            let d = Family::Bernoulli.unit_deviance(1.0, mu).unwrap();
            assert!(d <= prev);
            prev = d;
        }
        assert!(prev < 1e-10);
    }

    proptest! {
        #[test]
        fn unit_deviance_is_non_negative(y in 0u32..40, eta in -10.0f64..10.0, z in -50.0f64..50.0, bit in 0u8..2) {
            let y = y as f64;
            let mu = Family::Poisson.link_inverse(eta);
            prop_assert!(Family::Poisson.unit_deviance(y, mu).unwrap() >= 0.0);
            prop_assert!(Family::Gaussian.unit_deviance(z, eta).unwrap() >= 0.0);
            let p = Family::Bernoulli.link_inverse(eta);
            prop_assert!(Family::Bernoulli.unit_deviance(bit as f64, p).unwrap() >= 0.0);
            prop_assert_eq!(Family::Gaussian.unit_deviance(z, z).unwrap(), 0.0);
            prop_assert_eq!(Family::Poisson.unit_deviance(y, y.max(1e-300)).unwrap() * if y > 0.0 {1.0} else {0.0}, 0.0);
        }
    }
}
