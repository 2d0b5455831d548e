//! Multi-scale Chan-theory stroke features and reinforcement-learning
//! trading agents.

pub mod agents;
pub mod chan;
pub mod env;
pub mod error;
pub mod features;
pub mod market_data;
pub mod metrics;
pub mod nn;
