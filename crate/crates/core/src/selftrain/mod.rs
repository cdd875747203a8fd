//! Desk-scale self-training: a tiny pixel model, photometric views,
//! semantic and instance losses with analytic gradients, the training loop
//! with bank updates and regeneration, and mIoU evaluation.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod losses;
pub mod model;
pub mod train;

pub use augment::{AugmentConfig, AugmentationPair};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{component_variant, BankInit, GateOn, ModelConfig, RunConfig, COMPONENT_IDS};
pub use losses::{
    gate_mask, instance_loss_grad, overall_loss, source_loss, source_loss_grad, target_loss,
    target_loss_grad, target_pseudo,
};
pub use model::{backward, Cache, Forward, Grads, PixelModel};
pub use train::{
    evaluate_miou, step_gradients, train, DataSampler, Evaluation, LossWeights, Metrics,
    MetricsRow, StepLosses, TargetBatch, TrainOutcome, Trainer,
};
