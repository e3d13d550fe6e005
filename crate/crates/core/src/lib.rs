//! Simulated data attacks on product descriptions and robustness scoring
//! for product classifiers.

pub mod classify;
pub mod corpus;
pub mod llm;
pub mod metrics;
pub mod perturb;
pub mod pipeline;
pub mod prompt;
pub mod retrieval;
pub mod util;

/// Reserved normalized label for outputs that match no taxonomy leaf.
pub const INVALID_LABEL: &str = "INVALID";
