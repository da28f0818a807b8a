//! Prior-constrained self-critical sequence training at desk scale: n-gram
//! and neural-LM priors over the action space of an LSTM captioning policy,
//! REINFORCE training with a greedy baseline, and a caption metric suite.

pub mod config;
pub mod corpus;
pub mod error;
pub mod langmodel;
pub mod metrics;
pub mod neural;
pub mod ngram;
pub mod policy;
pub mod rl;
pub mod rng;

pub use error::{Error, Result};
