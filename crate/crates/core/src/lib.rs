//! Deterministic simulator of federated learning under client-dependent
//! label noise.
//!
//! The crate implements a dual-model client procedure (a global model and a
//! personalized model that pick clean samples for each other, tied together
//! by a distance regularizer and trained with a confidence regularizer) next
//! to FedAvg, FedProx and single-model sieve baselines. Around it sit noise
//! injection, IDX/synthetic data loading, detection metrics and a seeded
//! experiment harness.

pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod noise;
pub mod rng;
pub mod server;

pub use error::{FedError, Result};
