//! Denoiser shape configuration.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const DEFAULT_EMBED_MULTIPLIER: usize = 16;
pub const DEFAULT_HEADS: usize = 4;
pub const DEFAULT_COND_DIM: usize = 64;
pub const DEFAULT_CFG_DROPOUT: f64 = 0.25;
pub const DEFAULT_MLP_RATIO: usize = 4;
/// Width of the sinusoidal noise-step embedding fed to the condition encoder.
pub const SIN_DIM: usize = 16;

/// Shape and mode switches for the trajectory denoiser.
///
/// Stream embedding widths are `embed_multiplier ×` the raw element widths,
/// rounded up to a multiple of `heads` so attention heads divide evenly; the
/// padded widths are reported by [`DenoiserConfig::width_s`] and friends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    /// Steps per modeled window.
    pub horizon: usize,
    pub dim_s: usize,
    pub dim_a: usize,
    /// When false the reward encoder/decoder and both reward attention paths
    /// do not exist at all.
    pub reward_enabled: bool,
    pub embed_multiplier: usize,
    /// Self-attention block counts per stream.
    pub n_s: usize,
    pub n_a: usize,
    pub n_r: usize,
    pub heads: usize,
    pub cond_dim: usize,
    /// Probability of replacing the return condition with the null token
    /// during training (classifier-free guidance).
    pub cfg_dropout: f64,
    /// Feed-forward hidden width as a multiple of the stream width.
    pub mlp_ratio: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            dim_s: 4,
            dim_a: 2,
            reward_enabled: true,
            embed_multiplier: DEFAULT_EMBED_MULTIPLIER,
            n_s: 2,
            n_a: 2,
            n_r: 1,
            heads: DEFAULT_HEADS,
            cond_dim: DEFAULT_COND_DIM,
            cfg_dropout: DEFAULT_CFG_DROPOUT,
            mlp_ratio: DEFAULT_MLP_RATIO,
        }
    }
}

fn pad_to(width: usize, multiple: usize) -> usize {
    width.div_ceil(multiple) * multiple
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 2 {
            return Err(Error::config("horizon must be >= 2 (step 0 is the anchor)"));
        }
        if self.dim_s == 0 || self.dim_a == 0 {
            return Err(Error::config("state/action dims must be positive"));
        }
        if self.embed_multiplier == 0 || self.heads == 0 || self.cond_dim == 0 {
            return Err(Error::config("embed_multiplier, heads, cond_dim must be positive"));
        }
        if self.n_s == 0 || self.n_a == 0 || (self.reward_enabled && self.n_r == 0) {
            return Err(Error::config("self-attention block counts must be positive"));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("mlp_ratio must be positive"));
        }
        if !(0.0..1.0).contains(&self.cfg_dropout) {
            return Err(Error::config("cfg_dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Embedded state width (padded up to a head multiple when needed).
    pub fn width_s(&self) -> usize {
        pad_to(self.dim_s * self.embed_multiplier, self.heads)
    }

    pub fn width_a(&self) -> usize {
        pad_to(self.dim_a * self.embed_multiplier, self.heads)
    }

    pub fn width_r(&self) -> usize {
        pad_to(self.embed_multiplier, self.heads)
    }

    /// Width of one flattened (s, a, r) timestep block, reward included only
    /// when enabled.
    pub fn block_dim(&self) -> usize {
        self.dim_s + self.dim_a + usize::from(self.reward_enabled)
    }
}
