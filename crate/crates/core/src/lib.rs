//! Community reconstruction on sparse stochastic block models: broadcast
//! trees, exact and noisy belief-propagation posteriors, majority estimators
//! with closed-form moment oracles, sparse-graph coupling diagnostics, and
//! the spectral + BP-amplification reconstruction pipeline.
//!
//! Conventions used throughout:
//! * community and block labels are 1-based `u8` values in `1..=q`;
//! * probability vectors are 0-based with index `i` holding label `i+1`;
//! * every sampler takes an explicit seed, and Monte Carlo trials derive
//!   independent ChaCha8 streams from it, so results are reproducible under
//!   any scheduling.

pub mod assign;
pub mod bp;
pub mod config;
pub mod error;
pub mod majority;
pub mod model;
pub mod reconstruct;
pub mod report;
pub mod rng;
pub mod sampling;
pub mod sbm;
pub mod spectral;
pub mod tree;

pub use error::{Error, Result};
