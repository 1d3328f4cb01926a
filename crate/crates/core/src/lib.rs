//! Generalized linear latent variable models fitted by penalized
//! quasi-likelihood.
//!
//! Responses `y_ij` follow an exponential family with canonical link and
//! linear predictor `η_ij = β₀ⱼ + x_iᵀβⱼ + u_iᵀλⱼ`. Fitting minimises the
//! penalized quasi-likelihood either by alternating IRWLS
//! ([`airwls::fit_airwls`]) or by diagonal-Hessian Newton sweeps
//! ([`newton::fit_newton`]).

pub mod airwls;
pub mod data;
pub mod error;
pub mod eval;
mod exec;
pub mod family;
pub mod fit;
pub mod linalg;
pub mod newton;
pub mod pql;
pub mod scalar;
pub mod simulate;

pub use data::{FitConfig, FitReport, LineSearchConfig, Method, ModelParams, ResponseData};
pub use error::{GmfError, Result};
pub use family::Family;
pub use fit::{fit, fit_fixed_effects, fit_observed, IterationEvent};
pub use scalar::Scalar;

pub type ResponseData64 = ResponseData<f64>;
pub type ModelParams64 = ModelParams<f64>;
pub type FitConfig64 = FitConfig<f64>;
pub type ResponseData32 = ResponseData<f32>;
pub type ModelParams32 = ModelParams<f32>;
pub type FitConfig32 = FitConfig<f32>;
