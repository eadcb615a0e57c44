//! Federated long-tailed fine-tuning simulator over a linear adaptation head.
//!
//! Phase 1 trains a shared delta with zero-shot-aligned gradient purification;
//! Phase 2 fits per-client residual deltas whose logits are added to the
//! frozen global branch.

pub mod analysis;
pub mod config;
pub mod data;
pub mod divergence;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod linalg;
pub mod model;
pub mod par;
pub mod seed;

pub use error::{Error, Result};
