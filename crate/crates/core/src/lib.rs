//! Constrained text decoding by forward/backward refinement of soft token
//! logits, with unsupervised coherence ranking, a desk-scale causal
//! transformer LM, a synthetic causal-story corpus, and evaluation metrics.

pub mod checkpoint;
pub mod config;
pub mod constraints;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod ranker;
pub mod train;
pub mod tape;
pub mod util;
pub mod vocab;

pub use error::{Error, Result};
