//! Optimisation loop, evaluation and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod optim;
pub mod sampler;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::{Schedule, TrainConfig};
pub use data::Sample;
pub use eval::EvalReport;
pub use optim::{adamw_step, AdamHyper, AdamState};
pub use trainer::{StepLog, Trainer};
