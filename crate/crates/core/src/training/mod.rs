//! Loss, optimizer and training loop.

pub mod loss;
pub mod optim;
pub mod trainer;

pub use loss::{camera_loss, depth_loss, huber, total_loss, CameraLoss, DepthLoss, LossWeights};
pub use optim::{clip_grad_norm, lr_schedule, AdamW, OptimConfig};
pub use trainer::{
    apply_pretrain_trainability, batch_loss, prepare_batch, step_rng, train, BatchLoss, EpochLoss, PreparedBatch,
    StepRecord, TrainOptions, TrainReport, TrainState,
};
