//! Training, evaluation and file formats around the core model.

pub mod ablate;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod export;
pub mod gradsuite;
pub mod retrieval;
pub mod train;

pub use config::{ConfigError, Preset, RunConfig};
pub use retrieval::{EvalMode, RetrievalReport};
pub use train::{LossLog, TrainState};
