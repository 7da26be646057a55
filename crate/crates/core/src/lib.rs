//! Maximum-likelihood inverse reinforcement learning with neural soft Q-learning.
//!
//! The crate is organized bottom-up: [`env`] holds finite MDPs and their
//! Markov-chain quantities, [`soft`] the entropy-regularized planning oracle,
//! [`net`] the two-layer ReLU parameterization, [`soft_q`] neural soft
//! Q-learning, [`irl`] the reward-learning loops and [`diag`] the
//! likelihood-side diagnostics.

pub mod diag;
pub mod env;
pub mod error;
pub mod irl;
pub mod net;
pub mod parallel;
pub mod rng;
pub mod soft;
pub mod soft_q;

pub use error::{Error, Result};
