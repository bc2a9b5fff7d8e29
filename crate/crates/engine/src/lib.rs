//! Model-facing half of the pipeline: the LLM/VLM gateway, hypothesis
//! generation, slice verification and evaluation.

pub mod config;
pub mod evaluate;
pub mod export;
pub mod gateway;
pub mod generation;
pub mod planted;
pub mod replay;
pub mod store;
pub mod verify;

pub use config::{ConfigError, PipelineConfig};
pub use gateway::{Gateway, GatewayConfig, GatewayError};
