//! Everything around the engine needed to run experiments: config files,
//! synthetic tasks, the optimizer, the training loop, binary persistence,
//! sweep drivers and CSV output.

pub mod checkpoint;
pub mod config_file;
pub mod csv;
pub mod dump;
pub mod experiments;
pub mod optim;
pub mod tasks;
pub mod train;
pub mod train_config;
mod wire;

pub use checkpoint::Checkpoint;
pub use config_file::ConfigDoc;
pub use dump::ActivationDump;
pub use optim::{adamw_step, clip_global_norm, lr_at, AdamW, OptimizerState, StepOutcome};
pub use tasks::TaskSampler;
pub use train::{train, RunLog, StepRecord};
pub use train_config::{Task, TrainConfig};
