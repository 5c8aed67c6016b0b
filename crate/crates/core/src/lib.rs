//! Offline-to-online reinforcement learning: TD3, TD3-BC and TD3-C agents,
//! small continuous-control environments, offline datasets, replay regimes
//! and an experiment harness for studying policy collapse at the start of
//! online finetuning.

pub mod agents;
pub mod datasets;
pub mod envs;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod replay;
pub mod rollout;

pub use agents::{AgentHyper, AgentKind, ParamSet};
pub use datasets::{OfflineDataset, Recipe, Transition};
pub use envs::{EnvId, EnvSpec};
pub use error::{Error, Result};
pub use numerics::{RealArray, Rng};
pub use replay::{Regime, ReplayBuffer};
