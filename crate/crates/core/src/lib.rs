//! Gradient-inversion auditing for federated learning.
//!
//! The crate models both sides of a gradient-leakage audit:
//!
//! * a client computes the exact parameter gradient of one training example
//!   and releases it through a configurable defense pipeline
//!   ([`defense`], [`client`]);
//! * an adversary receives the defended share, infers the label, estimates
//!   the defense transform, and searches a generator's latent space for an
//!   image whose gradient matches the share ([`adversary`], [`generator`],
//!   [`optim`]);
//! * reconstruction quality and loss geometry are quantified by [`metrics`].
//!
//! Everything is deterministic under explicit seeds (see [`rng`]) and all
//! artifacts serialize to byte-stable formats ([`container`], [`imageio`]).

pub mod adversary;
pub mod client;
pub mod config;
pub mod container;
pub mod defense;
pub mod error;
pub mod generator;
pub mod hash;
pub mod imageio;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod selftest;
pub mod tensor;

pub use error::{Error, Result};
