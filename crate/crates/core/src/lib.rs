//! Divergent token metrics (first divergent token, share of divergent
//! tokens, divergent perplexity) and the compression procedures they drive,
//! built around a small decoder-only transformer.

pub mod compress;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod planner;
pub mod quantsearch;
pub mod train;

pub use error::{Error, Result};
pub use model::{ComponentId, ComponentKind, ModelConfig, TokenSequence, ToyModel};
pub use numerics::{Matrix, Quantile};
