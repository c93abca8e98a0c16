//! Synthetic cross-domain benchmark: a 2-D point mass under gravity and
//! linear drag, with configurable dynamics multipliers to manufacture
//! source/target gaps, a scripted data-collection controller, an exact
//! dynamics-residual oracle, and gap quantification.

use crate::check::median;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::training::Trajectory;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const NOMINAL_GRAVITY: f64 = 9.8;
pub const NOMINAL_DRAG: f64 = 0.5;
pub const NOMINAL_MASS: f64 = 1.0;
/// Initial positions are drawn uniformly from this centered square.
pub const START_BOX: f64 = 2.0;

/// State (px, py, vx, vy).
pub type State = [f64; 4];
/// Force action (fx, fy).
pub type Action = [f64; 2];

/// Point-mass dynamics parameters. Multipliers scale the nominal constants;
/// a domain is one choice of multipliers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub gravity_mult: f64,
    pub friction_mult: f64,
    pub mass_mult: f64,
    pub dt: f64,
    /// Maximum force magnitude. Large enough that gravity feed-forward stays
    /// representable even at 2–3× gravity.
    pub action_limit: f64,
    pub goal: [f64; 2],
    pub episode_length: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            gravity_mult: 1.0,
            friction_mult: 1.0,
            mass_mult: 1.0,
            dt: 0.05,
            action_limit: 30.0,
            goal: [0.0, 0.0],
            episode_length: 100,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mass_mult <= 0.0 {
            return Err(Error::config("mass_mult must be positive"));
        }
        if self.gravity_mult < 0.0 || self.friction_mult < 0.0 {
            return Err(Error::config("gravity/friction multipliers must be >= 0"));
        }
        if self.dt <= 0.0 {
            return Err(Error::config("dt must be positive"));
        }
        if self.action_limit <= 0.0 || self.episode_length == 0 {
            return Err(Error::config("action_limit and episode_length must be positive"));
        }
        Ok(())
    }

    pub fn gravity(&self) -> f64 {
        NOMINAL_GRAVITY * self.gravity_mult
    }

    pub fn drag(&self) -> f64 {
        NOMINAL_DRAG * self.friction_mult
    }

    pub fn mass(&self) -> f64 {
        NOMINAL_MASS * self.mass_mult
    }

    pub fn clip_action(&self, a: Action) -> Action {
        let norm = (a[0] * a[0] + a[1] * a[1]).sqrt();
        if norm > self.action_limit {
            let s = self.action_limit / norm;
            [a[0] * s, a[1] * s]
        } else {
            a
        }
    }
}

/// Semi-implicit Euler step. The action is clipped to the force limit;
/// reward is the negative distance of the post-step position to the goal.
pub fn step(s: &State, a: &Action, env: &EnvConfig) -> Result<(State, f64)> {
    let a = env.clip_action(*a);
    let (m, c, g) = (env.mass(), env.drag(), env.gravity());
    let vx = s[2] + env.dt * (a[0] / m - c * s[2] / m);
    let vy = s[3] + env.dt * (a[1] / m - c * s[3] / m - g);
    let px = s[0] + env.dt * vx;
    let py = s[1] + env.dt * vy;
    let next = [px, py, vx, vy];
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Simulation(format!("non-finite state {next:?}")));
    }
    let r = -((px - env.goal[0]).powi(2) + (py - env.goal[1]).powi(2)).sqrt();
    Ok((next, r))
}

/// Anything that maps states to forces.
pub trait Policy {
    fn act(&self, s: &State, rng: &mut dyn RngCore) -> Action;
}

/// PD controller toward the goal with gravity feed-forward and optional
/// seeded Gaussian exploration noise.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    pub kp: f64,
    pub kd: f64,
    pub noise_std: f64,
    /// Vertical force canceling gravity in the environment this controller
    /// was tuned on (m·g of that environment).
    pub gravity_ff: f64,
    pub goal: [f64; 2],
    pub action_limit: f64,
}

impl ScriptedPolicy {
    pub const KP: f64 = 4.0;
    pub const KD: f64 = 2.0;
    pub const NOISE_STD: f64 = 0.3;

    /// Controller tuned for `env` (its gravity feed-forward, goal, and force
    /// limit).
    pub fn tuned(env: &EnvConfig, noise_std: f64) -> Self {
        Self {
            kp: Self::KP,
            kd: Self::KD,
            noise_std,
            gravity_ff: env.mass() * env.gravity(),
            goal: env.goal,
            action_limit: env.action_limit,
        }
    }
}

impl Policy for ScriptedPolicy {
    fn act(&self, s: &State, rng: &mut dyn RngCore) -> Action {
        let mut ax = self.kp * (self.goal[0] - s[0]) - self.kd * s[2];
        let mut ay = self.kp * (self.goal[1] - s[1]) - self.kd * s[3] + self.gravity_ff;
        if self.noise_std > 0.0 {
            ax += self.noise_std * rng.sample::<f64, _>(rand_distr::StandardNormal);
            ay += self.noise_std * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        let norm = (ax * ax + ay * ay).sqrt();
        if norm > self.action_limit {
            let sc = self.action_limit / norm;
            [ax * sc, ay * sc]
        } else {
            [ax, ay]
        }
    }
}

/// Roll one episode from `start`, recording (s_t, a_t, r_t) transitions.
fn rollout_episode(
    env: &EnvConfig,
    policy: &dyn Policy,
    start: State,
    rng: &mut dyn RngCore,
) -> Result<(Tensor, Tensor, Tensor)> {
    let n = env.episode_length;
    let mut states = Vec::with_capacity(n * 4);
    let mut actions = Vec::with_capacity(n * 2);
    let mut rewards = Vec::with_capacity(n);
    let mut s = start;
    for _ in 0..n {
        let a = policy.act(&s, rng);
        let (next, r) = step(&s, &a, env)?;
        states.extend_from_slice(&s);
        actions.extend_from_slice(&a);
        rewards.push(r);
        s = next;
    }
    Ok((
        Tensor::from_raw(vec![n, 4], states),
        Tensor::from_raw(vec![n, 2], actions),
        Tensor::from_raw(vec![n, 1], rewards),
    ))
}

/// Collect full episodes from random starts in the fixed start box.
/// Deterministic given the seed.
pub fn collect(
    env: &EnvConfig,
    policy: &dyn Policy,
    n_episodes: usize,
    seed: u64,
    domain: &str,
) -> Result<Vec<Trajectory>> {
    env.validate()?;
    if n_episodes == 0 {
        return Err(Error::config("n_episodes must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let start = [
            rng.gen_range(-START_BOX..START_BOX),
            rng.gen_range(-START_BOX..START_BOX),
            0.0,
            0.0,
        ];
        let (states, actions, rewards) = rollout_episode(env, policy, start, &mut rng)?;
        out.push(Trajectory {
            states,
            actions,
            rewards: Some(rewards),
            domain: domain.to_string(),
        });
    }
    Ok(out)
}

/// Per-step dynamics residuals of recorded data against an environment:
/// ‖s_{t+1} − step(s_t, a_t)‖₂ for t = 0..T−2. The oracle for measuring how
/// far data sits from a domain's transition function.
#[derive(Debug, Clone)]
pub struct ResidualSummary {
    pub per_step: Vec<f64>,
    pub mean: f64,
    pub median: f64,
}

pub fn dynamics_residual(states: &Tensor, actions: &Tensor, env: &EnvConfig) -> Result<ResidualSummary> {
    if states.rows() < 2 {
        return Err(Error::dimension("dynamics_residual needs >= 2 timesteps"));
    }
    if states.cols() != 4 || actions.cols() != 2 || actions.rows() != states.rows() {
        return Err(Error::dimension(format!(
            "dynamics_residual: states {:?}, actions {:?}",
            states.shape(),
            actions.shape()
        )));
    }
    let mut per_step = Vec::with_capacity(states.rows() - 1);
    for t in 0..states.rows() - 1 {
        let s: State = states.row(t).try_into().expect("4-wide state row");
        let a: Action = actions.row(t).try_into().expect("2-wide action row");
        let (pred, _) = step(&s, &a, env)?;
        let actual = states.row(t + 1);
        let d: f64 = pred
            .iter()
            .zip(actual)
            .map(|(p, x)| (p - x) * (p - x))
            .sum::<f64>()
            .sqrt();
        per_step.push(d);
    }
    let mean = per_step.iter().sum::<f64>() / per_step.len() as f64;
    let med = median(&per_step);
    Ok(ResidualSummary {
        per_step,
        mean,
        median: med,
    })
}

/// Residual summary of a whole dataset: residuals pooled over trajectories.
pub fn dataset_residual(trajs: &[Trajectory], env: &EnvConfig) -> Result<ResidualSummary> {
    let mut pooled = Vec::new();
    for t in trajs {
        let r = dynamics_residual(&t.states, &t.actions, env)?;
        pooled.extend(r.per_step);
    }
    if pooled.is_empty() {
        return Err(Error::config("no residuals computed"));
    }
    let mean = pooled.iter().sum::<f64>() / pooled.len() as f64;
    let med = median(&pooled);
    Ok(ResidualSummary {
        per_step: pooled,
        mean,
        median: med,
    })
}

/// Deterministic paired evaluation: mean/std of episode returns for a policy
/// on an environment over seeded random starts.
#[derive(Debug, Clone)]
pub struct EvalResult {
    pub returns: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

pub fn evaluate(policy: &dyn Policy, env: &EnvConfig, n_episodes: usize, seed: u64) -> Result<EvalResult> {
    env.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut returns = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let start = [
            rng.gen_range(-START_BOX..START_BOX),
            rng.gen_range(-START_BOX..START_BOX),
            0.0,
            0.0,
        ];
        let (_, _, rewards) = rollout_episode(env, policy, start, &mut rng)?;
        returns.push(rewards.data().iter().sum());
    }
    let mean = returns.iter().sum::<f64>() / returns.len() as f64;
    let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / returns.len() as f64;
    Ok(EvalResult {
        returns,
        mean,
        std: var.sqrt(),
    })
}

/// Cross-domain gap quantification: the scripted controller tuned on the
/// source environment, evaluated in the target environment, against the
/// target-tuned controller on the same seeds.
#[derive(Debug, Clone, Serialize)]
pub struct GapReport {
    pub gap_name: String,
    pub source_return: f64,
    pub target_return: f64,
    pub per_seed: Vec<(f64, f64)>,
}

impl GapReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{}",
            self.gap_name, self.source_return, self.target_return
        )
    }

    /// Full CSV for a set of gap reports.
    pub fn to_csv(reports: &[GapReport]) -> String {
        let mut out = String::from(GAP_REPORT_CSV_HEADER);
        out.push('\n');
        for r in reports {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }
}

pub const GAP_REPORT_CSV_HEADER: &str = "gap_name,source_return,target_return";

pub fn quantify_gap(
    source_env: &EnvConfig,
    target_env: &EnvConfig,
    n_episodes: usize,
    n_seeds: u64,
    gap_name: &str,
) -> Result<GapReport> {
    let src_tuned = ScriptedPolicy::tuned(source_env, 0.0);
    let tgt_tuned = ScriptedPolicy::tuned(target_env, 0.0);
    let mut per_seed = Vec::with_capacity(n_seeds as usize);
    for seed in 0..n_seeds {
        let s = evaluate(&src_tuned, target_env, n_episodes, seed)?;
        let t = evaluate(&tgt_tuned, target_env, n_episodes, seed)?;
        per_seed.push((s.mean, t.mean));
    }
    let n = per_seed.len() as f64;
    Ok(GapReport {
        gap_name: gap_name.to_string(),
        source_return: per_seed.iter().map(|p| p.0).sum::<f64>() / n,
        target_return: per_seed.iter().map(|p| p.1).sum::<f64>() / n,
        per_seed,
    })
}

/// Largest singular value of the (state, action) → state Jacobian of `step`
/// in the unclipped regime, computed from (dt, m, c): the step's Lipschitz
/// constant.
pub fn lipschitz_bound(env: &EnvConfig) -> f64 {
    let dt = env.dt;
    let m = env.mass();
    let kappa = 1.0 - dt * env.drag() / m;
    let b = dt / m;
    // per-axis Jacobian rows: p' = p + dt·κ·v + dt·b·a ; v' = κ·v + b·a
    // J = [[1, dt·κ, dt·b], [0, κ, b]] (position, velocity, action columns)
    let j = [[1.0, dt * kappa, dt * b], [0.0, kappa, b]];
    // σ_max via eigenvalues of J·Jᵀ (2×2, symmetric)
    let g00 = j[0].iter().map(|x| x * x).sum::<f64>();
    let g11 = j[1].iter().map(|x| x * x).sum::<f64>();
    let g01 = j[0].iter().zip(j[1]).map(|(a, b)| a * b).sum::<f64>();
    let tr = g00 + g11;
    let det = g00 * g11 - g01 * g01;
    let lam = 0.5 * (tr + (tr * tr - 4.0 * det).max(0.0).sqrt());
    lam.sqrt()
}
