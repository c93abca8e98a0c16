//! Diffusion training loop: seeded shuffling, batched gradients, Adam.

use super::loss::{diffusion_loss_batch, draw_sample};
use super::normalizer::Normalizer;
use super::window::{window_dataset, Trajectory, Window};
use crate::error::{Error, Result};
use crate::model::{DenoiserConfig, DenoiserParams};
use crate::numerics::{adam_step, AdamState};
use crate::schedule::NoiseSchedule;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

pub const DEFAULT_LEARNING_RATE: f64 = 3e-4;
pub const DEFAULT_BATCH_SIZE: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Train with return conditioning and classifier-free dropout. Requires
    /// rewarded data.
    pub conditional: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: DEFAULT_LEARNING_RATE,
            seed: 0,
            conditional: false,
        }
    }
}

/// One metrics row per epoch: `epoch,step,loss,wall_ms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetric {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub wall_ms: u128,
}

pub struct TrainOutput {
    pub params: DenoiserParams,
    pub normalizer: Normalizer,
    pub metrics: Vec<EpochMetric>,
}

/// Train the denoiser on target-domain trajectories. Deterministic given the
/// seed: shuffle order, noise-step draws, ε draws, and condition dropout all
/// derive from it.
pub fn train(
    trajs: &[Trajectory],
    model_cfg: &DenoiserConfig,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    model_cfg.validate()?;
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::config("epochs and batch_size must be positive"));
    }
    if !sched.near_gaussian_terminal() {
        log::warn!(
            "terminal alpha_bar {:.4} >= 0.05: generation from pure noise will be biased",
            sched.alpha_bar(sched.len())
        );
    }
    let raw_windows = window_dataset(trajs, model_cfg.horizon)?;
    if raw_windows.is_empty() {
        return Err(Error::config("no training windows after windowing"));
    }
    let normalizer = Normalizer::fit(&raw_windows)?;
    let windows: Vec<Window> = raw_windows
        .iter()
        .map(|w| normalizer.normalize_window(w))
        .collect();
    if cfg.conditional && windows.iter().any(|w| w.ret.is_none()) {
        return Err(Error::config(
            "conditional training requires episode returns on every window",
        ));
    }

    let mut params = DenoiserParams::init(model_cfg, cfg.seed)?;
    let mut adam = AdamState::new(params.tensors(), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut step: u64 = 0;
    let start = Instant::now();
    let mut order: Vec<usize> = (0..windows.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let draws: Vec<_> = chunk
                .iter()
                .map(|&wi| {
                    draw_sample(wi, &windows[wi], &params, sched, cfg.conditional, &mut rng)
                })
                .collect();
            let (loss, grads) = diffusion_loss_batch(&windows, &draws, &params, sched)
                .map_err(|e| match e {
                    Error::Divergence(msg) => {
                        Error::Divergence(format!("{msg} (seed {})", cfg.seed))
                    }
                    other => other,
                })?;
            adam_step(params.tensors_mut(), &grads, &mut adam)?;
            epoch_loss += loss;
            step += 1;
            batches += 1;
        }
        metrics.push(EpochMetric {
            epoch,
            step,
            loss: epoch_loss / batches as f64,
            wall_ms: start.elapsed().as_millis(),
        });
    }

    Ok(TrainOutput {
        params,
        normalizer,
        metrics,
    })
}
