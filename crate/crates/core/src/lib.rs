//! Simulator for federated GCN training with historical-embedding importance
//! sampling and adaptive cross-client embedding synchronization.
//!
//! Every random draw descends from one `u64` run seed through
//! [`rng::derive_seed`], so a run is a pure function of its configuration,
//! graph, partition and seed.

// Negated float comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod cost;
pub mod embed;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod orchestrator;
pub mod probe;
pub mod rng;
pub mod sampler;
pub mod schedule;

pub use error::{Error, Result};
