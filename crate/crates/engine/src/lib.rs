//! Deep-research trajectory engine over `vdr-core`: model gateway, vision
//! search, text bridging, VQA synthesis, async rollout, RL batch
//! preparation and the `vdr` command line.

pub mod agent;
pub mod bench;
pub mod bridge;
pub mod calc;
pub mod cli;
pub mod config;
pub mod error;
pub mod forge;
pub mod gateway;
pub mod live;
pub mod prompts;
pub mod rlprep;
pub mod rollout;
pub mod scripted;
pub mod sim_agents;
pub mod synth;
pub mod tools;
pub mod vision;

pub use error::{ConfigError, GatewayError, PipelineError};
pub use vdr_core as core;
