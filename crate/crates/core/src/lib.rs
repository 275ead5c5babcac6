//! Structured pruning of neural networks with Kronecker-factored curvature.

pub mod checkpoint;
pub mod error;
pub mod kfac;
pub mod linalg;
pub mod nn;
pub mod oracle;
pub mod pipeline;
pub mod prune;
pub mod reparam;

pub use error::{Error, Result};
