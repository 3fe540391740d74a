//! Federated learning simulator with trainable per-round aggregation
//! weights.
//!
//! The library simulates heterogeneous-client federated training (FedAvg
//! and FedNova with several aggregation-weighting strategies) and learns a
//! per-round weight schedule by unrolling the full multi-round process into
//! a single differentiable graph and optimizing the weights against
//! accumulated client losses.

pub mod analysis;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
mod error;
pub mod fedsim;
pub mod fsutil;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod unfolding;
pub mod weighting;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod testutil;
