//! Deterministic discrete-event simulation of asynchronous decentralized
//! federated learning on desk-scale models.
//!
//! The library is organized around the lifecycle of a device's local update:
//!
//! - [`topology`] builds the static communication graph (exponential, ring,
//!   star) and samples diffusion targets.
//! - [`model`] holds the differentiable task models (softmax regression,
//!   one-hidden-layer MLP), synthetic non-IID data, and exact
//!   loss/gradient/Hessian evaluation with per-parameter masks.
//! - [`aggregation`] implements staleness-aware importance weights, the
//!   control-parameter gradient update, and masked heterogeneous model
//!   aggregation.
//! - [`selection`] is the learned neighbor-model selector: a small recurrent
//!   scorer trained online with a score-function policy gradient.
//! - [`pruning`] computes Hessian-aware parameter impact scores, lossless
//!   pruning rates from spectral gaps, and recomputes masks adaptively.
//! - [`sim`] wires everything into a deterministic event loop with simulated
//!   time, plus a synchronous-averaging baseline for comparison.
//! - [`config`] is the run configuration shared by the simulator and the CLI.
//!
//! All randomness flows through explicitly seeded streams (see [`rng`]);
//! identical configuration and seed produce byte-identical metrics output.

pub mod aggregation;
pub mod config;
pub mod gradcheck;
pub mod model;
pub mod pruning;
pub mod rng;
pub mod selection;
pub mod sim;
pub mod topology;
