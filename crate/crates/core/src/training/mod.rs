//! AdamW, the warmup-cosine schedule, the pretraining loop and checkpoints.

pub mod checkpoint;
mod optimizer;
mod schedule;
mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use optimizer::{adamw_step, clip_grad_norm, AdamW, OptimizerState};
pub use schedule::{lr_at, Schedule};
pub use trainer::{
    compute_gradients, fit, prepare_sample, train_step, EpochSummary, FitResult, StepRecord,
    Trainer, CONFIG_ECHO_FILE, FINAL_CHECKPOINT, METRICS_FILE, METRICS_HEADER,
};
