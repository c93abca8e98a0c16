//! Dataset windowing, normalization, and the diffusion training loop.

mod loss;
mod normalizer;
mod trainer;
mod window;

pub use loss::{
    anchored_noised, diffusion_loss_batch, draw_sample, masked_eps_loss, sample_loss_and_grads,
    sample_loss_value, SampleDraw,
};
pub use normalizer::{Normalizer, STD_FLOOR};
pub use trainer::{
    train, EpochMetric, TrainConfig, TrainOutput, DEFAULT_BATCH_SIZE, DEFAULT_LEARNING_RATE,
};
pub use window::{window_dataset, Anchor, Trajectory, Window};
