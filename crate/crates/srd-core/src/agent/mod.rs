//! Value-based policy learners: a from-scratch MLP Q-network with its DQN
//! training loop, a replay buffer, a tabular learner for diagnostic MDPs,
//! and a binary checkpoint format for trained policies.

pub mod checkpoint;
pub mod dqn;
pub mod network;
pub mod replay;
pub mod tabular;

pub use checkpoint::PolicyCheckpoint;
pub use dqn::{DqnAgent, TrainConfig};
pub use network::QNetwork;
pub use replay::ReplayBuffer;
