//! Bayesian semiparametric multivariate density regression with categorical
//! covariates.
//!
//! The model couples per-coordinate mixtures of truncated normals (with one
//! shared pool of kernel atoms) through a Gaussian copula. Mixture weights
//! vary with the covariates through a two-layer random partition structure:
//! the first layer clusters the levels of each covariate separately per
//! response coordinate, the second layer clusters the resulting aggregated
//! level combinations into at most a fixed number of distinct densities.
//! A covariate whose levels collapse into a single cluster has no influence
//! on that coordinate, which is how the model performs coordinate-wise
//! covariate selection.
//!
//! The crate provides the collapsed MCMC sampler, posterior density and
//! partition estimators, evaluation metrics, synthetic-data generators and a
//! command-line front end (`flower`). See the book under `book/` for a
//! guided tour; its code snippets compile as doc-tests of this crate.

pub mod copula;
pub mod data;
pub mod dist;
pub mod error;
pub mod estimators;
pub mod guide;
pub mod mixture;
pub mod partition;
pub mod rng;
pub mod sampler;
pub mod simgen;

pub use error::{Error, Result};
