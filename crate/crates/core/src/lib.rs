//! Estimation of multivariate extreme value (MEV) mode-choice models on
//! samples fused from non-randomly sampled sources.
//!
//! The crate covers the full pipeline:
//!
//! * [`dataset`] loads and validates long-format choice data;
//! * [`sampling`] turns a stratified sampling protocol into the `α` weights of
//!   the conditional maximum-likelihood estimator;
//! * [`mev`] evaluates utilities, MEV probabilities and the corrected
//!   log-likelihood with its analytic gradient;
//! * [`stage1`] runs the first-stage price regressions that feed the control
//!   function;
//! * [`estimate`] maximises the likelihood, runs the two-stage procedure,
//!   bootstraps standard errors and performs likelihood-ratio tests;
//! * [`poststat`] computes elasticities and simulated compensating variations;
//! * [`synth`] generates synthetic data with known ground truth.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]
pub mod dataset;
pub mod error;
pub mod estimate;
pub mod mev;
pub mod poststat;
pub mod sampling;
pub mod stage1;
pub mod synth;

pub use error::{Error, Result};
