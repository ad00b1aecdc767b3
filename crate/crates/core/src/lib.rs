//! Reliability-aware multi-agent task offloading for dynamic edge networks.

pub mod config;
pub mod env;
pub mod model;
pub mod rng;
pub mod topology;
pub mod heuristics;
pub mod oracle;
pub mod tensor;
pub mod mappo;
pub mod guidance;
pub mod fusion;
pub mod harness;
