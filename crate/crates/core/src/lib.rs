//! Desk-scale simulator of noise-robust federated learning across
//! heterogeneous clients: collaborative logit alignment on public data,
//! dynamic label refinement, symmetric cross-entropy training, and
//! confidence-based client re-weighting.

pub mod config;
pub mod data;
pub mod dlr;
pub mod eccr;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod losses;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
