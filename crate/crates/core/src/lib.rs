//! Agentic rollout engine for zoom-in visual grounding: entropy-gated
//! branching during tool calls, consensus-based tool credit, and
//! group-relative policy optimization over a pluggable policy.

pub mod analysis;
pub mod cca;
pub mod config;
pub mod entropy;
pub mod error;
pub mod grpo;
pub mod policy;
pub mod protocol;
pub mod reward;
pub mod rollout;
pub mod synthenv;
pub mod tools;
pub mod train;
pub mod types;

pub use error::{MedvrError, Result};
