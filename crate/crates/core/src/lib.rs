//! Bayesian mixed-effects location-scale models (MELSM) and a simulation
//! harness for studying how heteroscedasticity and model misspecification
//! affect bias and interval coverage.
//!
//! The crate is organised bottom-up:
//!
//! * [`formula`] parses lme4-style formulas and builds design matrices.
//! * [`model`] holds the dataset type and the MELSM log posterior with its
//!   analytic gradient.
//! * [`sampler`] is a multinomial No-U-Turn sampler with warmup adaptation
//!   and convergence diagnostics.
//! * [`simgen`] generates synthetic longitudinal cohorts with known truth.
//! * [`harness`] runs the built-in misspecification studies.
//! * [`report`] aggregates study records into coverage tables and boxplots.

pub mod error;
pub mod formula;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod report;
pub mod rng;
pub mod sampler;
pub mod simgen;

pub use error::{Error, ErrorKind};
