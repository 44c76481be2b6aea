//! Cross-document relation extraction enhanced with knowledge-graph context.

pub mod autograd;
pub mod classifier;
pub mod context;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod explain;
pub mod filters;
pub mod harness;
pub mod kg;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod reasoner;
pub mod retrieval;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
