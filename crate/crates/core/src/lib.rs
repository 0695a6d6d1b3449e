//! Federated construction of virtual-obstacle radio maps with location privacy.
//!
//! The crate is organised along the processing chain:
//!
//! * [`geometry`]: the discretised area and link/cell traversal.
//! * [`radio_model`]: the smoothed LOS/NLOS channel-gain model and its gradients.
//! * [`fed_engine`]: round-based federated training with clipping and noise.
//! * [`privacy`]: uniform and geometry-aligned noise allocation.
//! * [`adversary`]: the weighted-centroid location inference attack.
//! * [`experiments`]: scenario generation, orchestration, metrics and verifiers.

pub mod adversary;
pub mod error;
pub mod experiments;
pub mod fed_engine;
pub mod geometry;
pub mod privacy;
pub mod radio_model;
pub mod rng;

pub use error::{Error, Result};
