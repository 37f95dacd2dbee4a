//! Simulator for self-rewarded reinforcement learning on synthetic answer-selection tasks.

pub mod cli_io;
pub mod metrics;
pub mod policy;
pub mod rewards;
pub mod rl_core;
pub mod rng;
pub mod task_env;
pub mod trainer;
