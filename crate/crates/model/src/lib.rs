//! The causal-chain RPM solver: feature extraction, progressive-pattern
//! induction, pattern-consistency evaluation, and option scoring, plus the
//! three refinement methods that reshape its training objective
//! (hypothetical options, a GMM codebook over image features, and
//! metadata-aligned pattern supervision).

pub mod brando;
pub mod config;
pub mod dio;
pub mod diego;
pub mod extractor;
pub mod nn;
pub mod util;
pub mod world;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Ad(#[from] autodiff::AdError),
    #[error("config: {0}")]
    Config(String),
}

pub type Result<V> = std::result::Result<V, ModelError>;
