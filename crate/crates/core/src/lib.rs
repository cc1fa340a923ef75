//! Approximate minimax Q-learning for a queueing security game.

#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod eval;
pub mod features;
pub mod learner;
pub mod lyapunov;
pub mod model;
pub mod oracle;
mod par;
pub mod policy;
pub mod space;
