//! The conditional diffusion prior over fine-grid fields: noise schedule,
//! conditioning, the noise-prediction network and its training loop.

mod checkpoint;
mod condition;
mod model;
mod schedule;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_KIND};
pub use condition::{assemble_condition, temporal_embedding, ConditionBundle, CONTEXT_DIM, CONTEXT_TOKENS, STATIC_VARS};
pub use model::{Denoiser, DenoiserModel, DifferentiablePredictor, NetTrace, Normalization, NoisePredictor, PriorConfig};
pub use schedule::{forward_sample, NoiseSchedule};
pub use train::{train_prior, training_loss, EpochRecord, TrainConfig, TrainState, TrainingSet};
