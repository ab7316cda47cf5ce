//! Joint optimization: Adam with constraint clamping, the training loop,
//! evaluation metrics, and model checkpointing.

pub mod adam;
pub mod checkpoint;
pub mod metrics;
pub mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use metrics::{evaluate, Metrics};
pub use train::{train, History, TrainOutput, TrainSettings};
