//! Decoder-only transformer with optional MoE feed-forward layers.

pub mod checkpoint;
pub mod config;
pub mod ffn;
pub mod forward;
pub mod params;

pub use checkpoint::Checkpoint;
pub use config::MoEConfig;
pub use ffn::{swiglu, SwiGluParams, SwiGluVars};
pub use forward::{forward, lm_loss, ForwardOptions, ForwardOutput, TokenBatch};
pub use params::{FfnParams, LayerParams, ModelParams};
