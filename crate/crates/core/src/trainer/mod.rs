//! Optimizers, schedules, checkpoints and the training stages.

pub mod checkpoint;
pub mod optim;
pub mod schedule;
pub mod stages;

pub use checkpoint::{checksum, component_of, load_checkpoint, save_checkpoint, Checkpoint, Manifest, ModelSpec, TrainState};
pub use optim::{clip_grad_norm, global_grad_norm, Optimizer, OptimizerKind};
pub use schedule::{cosine_lr, CosineSchedule};
pub use stages::{init_light_t, init_model, run_joint_e2e, run_stage1, run_stage2, stage2_model, train_stage, RunOptions, StageRun};
