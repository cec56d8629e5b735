//! Reptile meta-reinforcement learning, PPO and DQN over a deterministic tile
//! platformer, plus a seeded benchmark harness.

pub mod env;
pub mod tensor;
pub mod policy;
pub mod episode;
pub mod error;
pub mod replay;

pub use error::{Error, Result};
pub mod metrics;
pub mod reptile;
pub mod ppo;
pub mod dqn;
pub mod bench;
