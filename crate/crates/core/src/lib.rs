//! ReLU-routed and TopK-routed mixture-of-experts laboratory.
//!
//! The crate bundles a small reverse-mode autodiff engine, the routers and
//! their regularizers, a tiny decoder-only transformer, a training loop with
//! adaptive sparsity control, and the routing diagnostics used to study it.

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod regularization;
pub mod routing;
pub mod training;

pub use error::{LabError, Result};
