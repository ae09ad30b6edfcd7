//! Function approximators: tanh MLPs, Adam, Gaussian policy heads and
//! parameter checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod mlp;
pub mod policy;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{AgentParameters, Checkpoint};
pub use mlp::{ForwardCache, Mlp, MlpGradients};
pub use policy::{sigmoid, AgentAction, GaussianPolicyHead, LogProbGrad, Priority};
