//! Covariate-balancing sieve estimation of the average treatment effect with
//! a binary instrument and unmeasured confounding.
//!
//! The pipeline is: build orthonormal sieve bases ([`sieve`]), fit the dual
//! calibration weights and the tanh-link instrument effect ([`solver`]),
//! combine them into the plug-in estimate ([`estimator`]), and attach a
//! sandwich standard error ([`variance`]). [`tuning`] picks the sieve sizes
//! and [`simulator`] runs Monte Carlo studies on a synthetic design with
//! known truth.

pub mod cli;
pub mod data;
pub mod error;
pub mod estimator;
pub mod links;
pub mod sieve;
pub mod simulator;
pub mod solver;
pub mod tuning;
pub mod variance;

pub use data::Dataset;
pub use error::{Error, Result};
