//! Experiment configuration: strict TOML with defaults echoed into the run
//! manifest. Unknown keys are rejected so typos never silently fall back to
//! defaults.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;
use xted_core::downstream::BcConfig;
use xted_core::editing::{EditConfig, GuidanceConfig};
use xted_core::envsuite::EnvConfig;
use xted_core::model::DenoiserConfig;
use xted_core::schedule::ScheduleSpec;
use xted_core::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvPair {
    pub target: EnvConfig,
    pub source: EnvConfig,
}

impl Default for EnvPair {
    fn default() -> Self {
        Self {
            target: EnvConfig::default(),
            source: EnvConfig {
                gravity_mult: 2.0,
                ..EnvConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectConfig {
    pub episodes: usize,
    pub policy_noise_std: f64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            episodes: 200,
            policy_noise_std: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub windows: usize,
    pub guidance: Option<GuidanceConfig>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            windows: 200,
            guidance: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct S4rlConfig {
    pub sigma2: f64,
}

impl Default for S4rlConfig {
    fn default() -> Self {
        Self {
            sigma2: xted_core::editing::DEFAULT_S4RL_SIGMA2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seeds: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 10,
            seeds: 3,
        }
    }
}

/// The whole experiment document. Every field has a default; the resolved
/// (post-default, post-override) form is what lands in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: Option<String>,
    pub env: EnvPair,
    pub collect: CollectConfig,
    pub schedule: ScheduleSpec,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub edit: EditConfig,
    pub generate: GenerateConfig,
    pub s4rl: S4rlConfig,
    pub bc: BcConfig,
    pub eval: EvalConfig,
}

/// Fixed per-role seed offsets from the global seed, so every pipeline stage
/// gets an independent deterministic stream.
pub mod seed_role {
    pub const COLLECT_TARGET: u64 = 0;
    pub const COLLECT_SOURCE: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const EDIT: u64 = 3;
    pub const GENERATE: u64 = 4;
    pub const S4RL: u64 = 5;
    pub const BC: u64 = 6;
    pub const EVAL: u64 = 7;
}

impl ExperimentConfig {
    /// Parse, apply the XTED_SEED override if present, and propagate the
    /// global seed into every section (section-local seed values are derived,
    /// never read from the file).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if let Ok(s) = std::env::var("XTED_SEED") {
            cfg.seed = s
                .parse()
                .with_context(|| format!("XTED_SEED must be an integer, got {s:?}"))?;
        }
        cfg.train.seed = cfg.seed + seed_role::TRAIN;
        cfg.edit.seed = cfg.seed + seed_role::EDIT;
        cfg.bc.seed = cfg.seed + seed_role::BC;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.target.validate()?;
        self.env.source.validate()?;
        self.model.validate()?;
        self.schedule.build()?;
        self.edit.validate()?;
        if self.collect.episodes == 0 || self.eval.episodes == 0 || self.eval.seeds == 0 {
            bail!("collect.episodes, eval.episodes, eval.seeds must be positive");
        }
        if self.env.target.episode_length < self.model.horizon {
            bail!(
                "episode_length {} shorter than model horizon {}",
                self.env.target.episode_length,
                self.model.horizon
            );
        }
        Ok(())
    }
}
