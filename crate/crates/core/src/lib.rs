//! Probabilistic functional neural networks for spatio-temporal functional
//! time series.
//!
//! Curves observed on a common grid for `H` regions and `T` time points are
//! encoded through a basis expansion, mapped to latent Gaussian-process
//! parameters, propagated forward in time by GP conditioning and decoded back
//! to curves. Forecasts are ensembles of such decoded draws.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod autodiff;
pub mod basis;
pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod error;
pub mod forecasting;
pub mod model;
pub mod objective;
pub mod seed;
pub mod synthgen;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
