//! Measuring and engineering the quality of imitation-learning datasets.
//!
//! The crate is organised around the trajectory [`dataset::Dataset`]:
//!
//! - [`metrics`] computes ε-cluster action variance and state similarity.
//! - [`coverage`] evaluates the analytic next-state coverage probabilities
//!   together with Monte-Carlo estimators of the events they describe.
//! - [`mdp`] computes exact state visitation on tabular MDPs and checks the
//!   distribution-shift bounds numerically.
//! - [`pmobstacle`] is a 2D point-mass navigation task with a scripted expert
//!   used to generate noisy demonstration data.
//! - [`bc`] trains a from-scratch MLP behavioural-cloning policy.
//! - [`harness`] runs the data-noising sweeps and exports result tables.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bc;
pub mod coverage;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod mdp;
pub mod metrics;
pub mod pmobstacle;
pub mod quadrature;
pub mod rng;
pub mod stats;

#[cfg(test)]
mod proptests;

pub use error::{Error, Result};
