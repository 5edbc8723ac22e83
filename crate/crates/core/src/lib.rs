//! Mixture-of-experts translation toolkit: a desk-scale MoE encoder-decoder,
//! routing statistics gathered while decoding, expert pruning, evaluation
//! and expert-specialization analysis.

pub mod analysis;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
pub mod mask;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod pruning;
pub mod stats;
pub mod train;
pub mod vocab;

pub use config::{ModelConfig, Side};
pub use error::{Error, Result};
pub use mask::PruningMask;
pub use model::{GateDecision, MoEModel};
