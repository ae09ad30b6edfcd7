//! Joint learning of control actions and communication priorities for
//! decentralised multi-agent systems on a bandwidth-limited, lossy network.
//!
//! * [`nn`]: tanh MLPs, Adam, Gaussian policy heads, checkpoints
//! * [`env`]: Coverage and Formation particle tasks
//! * [`comm`]: slot allocation, lossy delayed broadcast, observation assembly
//! * [`ppo`] and [`buffer`]: GAE and clipped PPO objectives
//! * [`trainer`]: the independent-PPO training and evaluation loops

pub mod buffer;
pub mod comm;
pub mod env;
pub mod error;
pub mod nn;
pub mod ppo;
pub mod trainer;

pub use error::{Error, Result};
