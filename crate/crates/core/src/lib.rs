//! Distributed primal-dual learning for constrained multi-agent
//! reinforcement learning with coupled policies.
//!
//! The crate is organized bottom-up: [`graph`] and [`model`] describe the
//! network and the environment, [`policy`] and [`sampling`] generate
//! behavior, [`pushsum`] and [`estimators`] are the per-agent building blocks,
//! and [`dspd`] runs the full loop. [`oracle`] solves small models exactly so
//! the rest can be checked against ground truth, and [`suite`] bundles those
//! checks.
//!
//! [`gridworld`] is the 5×5 four-agent benchmark. [`config`], [`runner`] and
//! [`metrics`] turn JSON configs into run directories.

// `!(x > 0.0)` style checks are how validation rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dspd;
pub mod error;
pub mod estimators;
pub mod graph;
pub mod gridworld;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod policy;
pub mod pushsum;
pub mod rng;
pub mod runner;
pub mod sampling;
pub mod suite;

pub use error::{Error, Result};
