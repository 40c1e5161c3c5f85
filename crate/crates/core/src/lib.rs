//! Related search query suggestion with a seq2seq generator fine-tuned by
//! REINFORCE against a composite session/relatedness/naturalness reward.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod estimator;
pub mod generator;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod reinforce;
pub mod reward;
pub mod tensor;

pub use error::{Error, Result};

/// Seeded generator used everywhere randomness is needed.
pub type SeedRng = rand_chacha::ChaCha8Rng;
