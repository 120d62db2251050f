//! Loss, optimizer, training loop, checkpoints and gradient checking.

pub mod adamw;
pub mod checkpoint;
pub mod grad_check;
pub mod trainer;

pub use adamw::{adamw_step, AdamWConfig, AdamWState};
pub use checkpoint::{checkpoint_dtype, Checkpoint};
pub use grad_check::{grad_check, micro_config, GradCheckConfig, GradCheckReport};
pub use trainer::{image_gradients, image_loss, image_tensor, load_model, train, LogRecord, TrainOptions, TrainOutcome};
