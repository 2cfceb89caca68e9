//! Federated generative adversarial training across simulated sites that
//! share nothing but a central adversary trained on synthetic samples.
//!
//! - [`gan`]: measure-function GAN family, local value and update steps.
//! - [`mechanism`]: the federated objective, central adversary and rounds.
//! - [`checkpoint`]: generator checkpoint store.
//! - [`partition`]: non-IID site shards (cluster mix, subgroup bias, fixed counts).
//! - [`eval`]: downstream-utility evaluation and run aggregation.

pub mod checkpoint;
pub mod corpus;
pub mod data;
pub mod eval;
pub mod gan;
pub mod mechanism;
pub mod nn;
pub mod partition;
pub mod rng;
