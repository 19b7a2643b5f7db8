//! Model-free estimands for sequentially emulated target trials.
//!
//! The crate covers the full estimation path for person-time data in which
//! a new trial starts at every visit (or calendar date):
//!
//! - [`panel`]: long-format person-time records, eligibility and clone expansion.
//! - [`glm`]: least squares and logit/probit regression fitted by IRLS.
//! - [`mestim`]: stacked estimating equations with cluster-robust sandwich covariance.
//! - [`estimators`]: IPW and G-computation estimators for the uniform,
//!   eligibility-weighted and baseline-adjusted effects.
//! - [`comparators`]: pooled OLS, the g-estimator and pooled logistic MLE,
//!   plus Monte Carlo evaluation of their population limits.
//! - [`simgen`]: data-generating processes, estimand oracles and the
//!   replication study aggregation.
//!
//! Everything here is `no_std` + `alloc`. File formats, the CLI and the
//! parallel replication driver live in the companion `tte` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod comparators;
pub mod error;
pub mod estimators;
pub mod glm;
pub mod math;
pub mod mestim;
pub mod panel;
pub mod simgen;

pub use error::{Error, Result};
