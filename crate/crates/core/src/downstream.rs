//! Behavior-cloning learner and the four-arm comparison harness:
//! target-only vs target+source vs target+augmented-target vs
//! target+edited-source, trained on equal gradient budgets and evaluated in
//! the target environment.

use crate::editing::{edit, s4rl_augment, EditConfig};
use crate::envsuite::{evaluate, Action, EnvConfig, EvalResult, Policy, State};
use crate::error::{Error, Result};
use crate::model::DenoiserParams;
use crate::numerics::{adam_step, AdamState, Graph, Tensor};
use crate::schedule::NoiseSchedule;
use crate::training::{Normalizer, Window};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const DEFAULT_BC_LEARNING_RATE: f64 = 1e-4;
pub const DEFAULT_BC_HIDDEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BcConfig {
    pub hidden: usize,
    /// Total gradient steps; the equal-budget knob for comparisons.
    pub grad_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_BC_HIDDEN,
            grad_steps: 2000,
            batch_size: 64,
            learning_rate: DEFAULT_BC_LEARNING_RATE,
            seed: 0,
        }
    }
}

/// Three-layer state→action regressor with its input/output normalizer.
/// Actions are clipped to the environment force limit at inference.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub dim_s: usize,
    pub dim_a: usize,
    pub hidden: usize,
    /// w1, b1, w2, b2, w3, b3.
    pub tensors: Vec<Tensor>,
    pub normalizer: Normalizer,
    pub action_limit: f64,
    /// Per-step training losses, in order.
    pub step_losses: Vec<f64>,
}

impl PolicyParams {
    fn silu(x: f64) -> f64 {
        x / (1.0 + (-crate::numerics::SILU_SLOPE * x).exp())
    }

    /// Plain forward pass (no recording): normalized state in, raw action out.
    pub fn action_for(&self, state: &[f64]) -> Vec<f64> {
        let sn: Vec<f64> = state
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.normalizer.state_mean[i]) / self.normalizer.state_std[i])
            .collect();
        let dense = |x: &[f64], w: &Tensor, b: &Tensor| -> Vec<f64> {
            let (din, dout) = (w.rows(), w.cols());
            let mut out = b.data().to_vec();
            for (i, &xi) in x.iter().enumerate().take(din) {
                for j in 0..dout {
                    out[j] += xi * w.at2(i, j);
                }
            }
            out
        };
        let h1: Vec<f64> = dense(&sn, &self.tensors[0], &self.tensors[1])
            .into_iter()
            .map(Self::silu)
            .collect();
        let h2: Vec<f64> = dense(&h1, &self.tensors[2], &self.tensors[3])
            .into_iter()
            .map(Self::silu)
            .collect();
        let out = dense(&h2, &self.tensors[4], &self.tensors[5]);
        let raw: Vec<f64> = out
            .iter()
            .enumerate()
            .map(|(j, v)| v * self.normalizer.action_std[j] + self.normalizer.action_mean[j])
            .collect();
        let norm: f64 = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > self.action_limit {
            raw.iter().map(|v| v * self.action_limit / norm).collect()
        } else {
            raw
        }
    }
}

impl Policy for PolicyParams {
    fn act(&self, s: &State, _rng: &mut dyn RngCore) -> Action {
        let a = self.action_for(s);
        [a[0], a[1]]
    }
}

/// One (state, action) training pair in flat f64 form.
#[derive(Clone)]
struct Transition {
    data: Vec<f64>,
    dim_s: usize,
}

impl Transition {
    fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }
}

/// Flatten windows into transitions, then canonicalize: sort by content hash
/// and drop bit-exact duplicates. This makes training invariant to dataset
/// concatenation order and to literal duplication.
fn canonical_transitions(windows: &[Window]) -> Vec<Transition> {
    let mut out = Vec::new();
    for w in windows {
        let (ds, da) = (w.streams.states.cols(), w.streams.actions.cols());
        for t in 0..w.horizon() {
            let mut data = Vec::with_capacity(ds + da);
            data.extend_from_slice(w.streams.states.row(t));
            data.extend_from_slice(w.streams.actions.row(t));
            out.push(Transition { data, dim_s: ds });
        }
    }
    let mut keyed: Vec<([u8; 32], Transition)> = out.into_iter().map(|t| (t.hash(), t)).collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0));
    keyed.dedup_by(|a, b| a.0 == b.0 && a.1.data == b.1.data);
    keyed.into_iter().map(|(_, t)| t).collect()
}

/// Supervised L2 regression from states to actions with Adam. Deterministic
/// per seed; the shuffle is keyed on the canonicalized dataset content.
pub fn bc_train(windows: &[Window], action_limit: f64, cfg: &BcConfig) -> Result<PolicyParams> {
    if windows.is_empty() {
        return Err(Error::config("behavior cloning needs a non-empty dataset"));
    }
    if cfg.grad_steps == 0 || cfg.batch_size == 0 || cfg.hidden == 0 {
        return Err(Error::config("grad_steps, batch_size, hidden must be positive"));
    }
    let transitions = canonical_transitions(windows);
    let n = transitions.len();
    let dim_s = transitions[0].dim_s;
    let dim_a = transitions[0].data.len() - dim_s;

    // dataset-content hash folds into the shuffle seed
    let mut h = Sha256::new();
    for t in &transitions {
        h.update(t.hash());
    }
    let digest: [u8; 32] = h.finalize().into();
    let content_seed = u64::from_le_bytes(digest[..8].try_into().unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ content_seed);

    // normalizer over the canonical transitions
    let mut s_mat = Vec::with_capacity(n * dim_s);
    let mut a_mat = Vec::with_capacity(n * dim_a);
    for t in &transitions {
        s_mat.extend_from_slice(&t.data[..dim_s]);
        a_mat.extend_from_slice(&t.data[dim_s..]);
    }
    let states = Tensor::from_raw(vec![n, dim_s], s_mat);
    let actions = Tensor::from_raw(vec![n, dim_a], a_mat);
    let normalizer = Normalizer::from_matrices(&states, &actions);
    let sn = normalizer.normalize_states(&states);
    let an = normalizer.normalize_actions(&actions);

    // three dense layers
    let mut prng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e3779b97f4a7c15));
    let glorot = |i: usize, o: usize, r: &mut ChaCha8Rng| {
        Tensor::randn_scaled(&[i, o], (2.0 / (i + o) as f64).sqrt(), r)
    };
    let mut tensors = vec![
        glorot(dim_s, cfg.hidden, &mut prng),
        Tensor::zeros(&[1, cfg.hidden]),
        glorot(cfg.hidden, cfg.hidden, &mut prng),
        Tensor::zeros(&[1, cfg.hidden]),
        glorot(cfg.hidden, dim_a, &mut prng),
        Tensor::zeros(&[1, dim_a]),
    ];
    let mut adam = AdamState::new(&tensors, cfg.learning_rate);

    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n; // trigger shuffle on first step
    let mut step_losses = Vec::with_capacity(cfg.grad_steps);
    use rand::seq::SliceRandom;

    for _ in 0..cfg.grad_steps {
        if cursor + cfg.batch_size > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch: &[usize] = &order[cursor..(cursor + cfg.batch_size).min(n)];
        cursor += cfg.batch_size;

        let b = batch.len();
        let mut xb = Vec::with_capacity(b * dim_s);
        let mut yb = Vec::with_capacity(b * dim_a);
        for &i in batch {
            xb.extend_from_slice(sn.row(i));
            yb.extend_from_slice(an.row(i));
        }
        let x = Tensor::from_raw(vec![b, dim_s], xb);
        let y = Tensor::from_raw(vec![b, dim_a], yb);

        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let vars: Vec<_> = tensors.iter().map(|t| g.leaf(t)).collect();
        let h1 = g.dense(xv, vars[0], vars[1])?;
        let h1 = g.silu(h1);
        let h2 = g.dense(h1, vars[2], vars[3])?;
        let h2 = g.silu(h2);
        let out = g.dense(h2, vars[4], vars[5])?;
        let yv = g.leaf(&y);
        let loss = g.mse(out, yv)?;
        let loss_val = g.value(loss).data()[0];
        if !loss_val.is_finite() {
            return Err(Error::Divergence(format!(
                "behavior cloning diverged (seed {})",
                cfg.seed
            )));
        }
        g.backward(loss)?;
        let grads: Vec<Tensor> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();
        adam_step(&mut tensors, &grads, &mut adam)?;
        step_losses.push(loss_val);
    }

    Ok(PolicyParams {
        dim_s,
        dim_a,
        hidden: cfg.hidden,
        tensors,
        normalizer,
        action_limit,
        step_losses,
    })
}

/// Mean per-epoch training loss (an epoch is one pass over the dataset).
pub fn epoch_averages(step_losses: &[f64], steps_per_epoch: usize) -> Vec<f64> {
    step_losses
        .chunks(steps_per_epoch.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

// ── comparison harness ──────────────────────────────────────────────────

pub const ARM_TGT: &str = "tgt";
pub const ARM_TGT_SRC: &str = "tgt+src";
pub const ARM_TGT_S4RL: &str = "tgt+s4rl";
pub const ARM_TGT_EDITED: &str = "tgt+edited_src";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComparisonConfig {
    pub bc: BcConfig,
    pub seeds: u64,
    pub eval_episodes: usize,
    pub s4rl_sigma2: f64,
    pub edit: EditConfig,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        Self {
            bc: BcConfig::default(),
            seeds: 5,
            eval_episodes: 10,
            s4rl_sigma2: crate::editing::DEFAULT_S4RL_SIGMA2,
            edit: EditConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub arm: String,
    pub seed: u64,
    pub mean_return: f64,
    pub std_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
}

pub const COMPARISON_CSV_HEADER: &str = "arm,seed,mean_return,std_return,delta_pct";

impl ComparisonReport {
    /// Seed-mean return of an arm.
    pub fn arm_mean(&self, arm: &str) -> f64 {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.arm == arm)
            .map(|r| r.mean_return)
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    /// Gain/degradation of an arm against the target-only baseline, in
    /// percent. Positive means better; returns here are negative, so the
    /// denominator uses the baseline magnitude.
    pub fn delta_pct(&self, arm: &str) -> f64 {
        let base = self.arm_mean(ARM_TGT);
        (self.arm_mean(arm) - base) / base.abs() * 100.0
    }

    /// Per-seed rows with paired per-seed deltas against the tgt arm.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(COMPARISON_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let base = self
                .rows
                .iter()
                .find(|b| b.arm == ARM_TGT && b.seed == r.seed)
                .map(|b| b.mean_return)
                .unwrap_or(f64::NAN);
            let delta = (r.mean_return - base) / base.abs() * 100.0;
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.arm, r.seed, r.mean_return, r.std_return, delta
            ));
        }
        out
    }
}

/// Train and evaluate the four arms on equal gradient budgets.
///
/// The source set is edited once with the supplied prior; per-seed variation
/// comes from behavior-cloning initialization/shuffling and paired evaluation
/// seeds shared across arms.
pub fn run_comparison(
    target_windows: &[Window],
    source_windows: &[Window],
    params: &DenoiserParams,
    diffusion_normalizer: &Normalizer,
    sched: &NoiseSchedule,
    target_env: &EnvConfig,
    cfg: &ComparisonConfig,
) -> Result<ComparisonReport> {
    if target_windows.is_empty() || source_windows.is_empty() {
        return Err(Error::config("comparison needs target and source windows"));
    }
    let edited = edit(source_windows, params, diffusion_normalizer, &cfg.edit, sched)?.windows;
    let s4rl_target = s4rl_augment(target_windows, cfg.s4rl_sigma2, cfg.edit.seed)?;

    let mix = |extra: &[Window]| -> Vec<Window> {
        let mut v = target_windows.to_vec();
        v.extend_from_slice(extra);
        v
    };
    let arms: Vec<(&str, Vec<Window>)> = vec![
        (ARM_TGT, target_windows.to_vec()),
        (ARM_TGT_SRC, mix(source_windows)),
        (ARM_TGT_S4RL, mix(&s4rl_target)),
        (ARM_TGT_EDITED, mix(&edited)),
    ];

    let mut rows = Vec::new();
    for seed in 0..cfg.seeds {
        for (arm_idx, (arm, data)) in arms.iter().enumerate() {
            let bc_cfg = BcConfig {
                seed: cfg
                    .bc
                    .seed
                    .wrapping_add(seed * 131)
                    .wrapping_add(arm_idx as u64 * 7919),
                ..cfg.bc.clone()
            };
            let policy = bc_train(data, target_env.action_limit, &bc_cfg)?;
            let eval: EvalResult = evaluate(&policy, target_env, cfg.eval_episodes, 1000 + seed)?;
            rows.push(ComparisonRow {
                arm: arm.to_string(),
                seed,
                mean_return: eval.mean,
                std_return: eval.std,
            });
        }
    }
    Ok(ComparisonReport { rows })
}
