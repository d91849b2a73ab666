//! Federated learning simulation with temporal model soups.
//!
//! Clients train small MLPs on synthetic, distribution-shifted data. Besides
//! FedAvg, FedProx and local-only training, the engine implements FedSoup:
//! each client keeps a soup of historical global models, admitted greedily by
//! local validation accuracy, and interpolates its local model with that soup
//! after every local update once the interpolation phase starts. The crate
//! also measures loss sharpness (median dominant Hessian eigenvalue) and the
//! local/global/unseen-domain evaluation axes.

pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod report;
pub mod rng;
pub mod sharpness;
pub mod soup;

pub use error::{Error, Result};
