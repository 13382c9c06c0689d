//! Data, optimization and the training loop.

pub mod config;
pub mod data;
pub mod optim;
pub mod stage;
pub mod trainer;

pub use config::{DataConfig, TrainConfig};
pub use data::{decode_tokens, synthetic_corpus, tokenize_bytes, Batch, CorpusStream, Source};
pub use optim::{clip_global_norm, cosine_lr, AdamW};
pub use stage::{detect_stage, stage_boundaries, Stage, StageDetector};
pub use trainer::{RunOptions, RunSummary, StepOutcome, Trainer};
