//! Trajectory editing: partial noising at ratio κ, anchored denoising with
//! the trained target prior, multi-iteration refinement, classifier-free
//! return guidance, pure generation from noise, and the state-noise
//! augmentation baseline.

use crate::error::{Error, Result};
use crate::exec;
use crate::model::{ConditionInput, DenoiserParams, NoisePrediction, TrajStreams};
use crate::numerics::Tensor;
use crate::schedule::NoiseSchedule;
use crate::training::{Normalizer, Window};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_KAPPA: f64 = 0.5;
pub const DEFAULT_GUIDANCE_RETURN: f64 = 0.9;
pub const DEFAULT_GUIDANCE_OMEGA: f64 = 1.0;
pub const DEFAULT_S4RL_SIGMA2: f64 = 3e-4;

/// Classifier-free guidance: target normalized return and blend weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub r_target: f64,
    pub omega: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            r_target: DEFAULT_GUIDANCE_RETURN,
            omega: DEFAULT_GUIDANCE_OMEGA,
        }
    }
}

/// Parameters of one editing run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditConfig {
    /// Fraction of the K diffusion steps used to noise then denoise.
    pub kappa: f64,
    /// Editing iterations e; each re-noises and re-denoises the previous
    /// iteration's output with fresh noise.
    pub iterations: usize,
    pub guidance: Option<GuidanceConfig>,
    pub anchor_enabled: bool,
    pub seed: u64,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            kappa: DEFAULT_KAPPA,
            iterations: 1,
            guidance: None,
            anchor_enabled: true,
            seed: 0,
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(Error::config(format!("kappa {} outside [0, 1]", self.kappa)));
        }
        if self.iterations == 0 {
            return Err(Error::config("iterations must be >= 1"));
        }
        if let Some(g) = &self.guidance {
            if !(0.0..=1.0).contains(&g.r_target) {
                return Err(Error::config(format!(
                    "guidance target return {} outside [0, 1]",
                    g.r_target
                )));
            }
            if !g.omega.is_finite() || g.omega < 0.0 {
                return Err(Error::config(format!("guidance omega {} invalid", g.omega)));
            }
        }
        Ok(())
    }

    /// Number of noising/denoising steps per iteration: round(κ·K).
    pub fn k_steps(&self, total_steps: usize) -> usize {
        (self.kappa * total_steps as f64).round() as usize
    }
}

/// Edited windows plus step accounting.
#[derive(Debug, Clone)]
pub struct EditOutcome {
    pub windows: Vec<Window>,
    pub k_steps: usize,
    /// Total reverse (denoising) steps across all iterations, per window.
    pub reverse_steps_per_window: usize,
}

/// Classifier-free guided noise: ε(τ,∅,k) + ω·(ε(τ,R,k) − ε(τ,∅,k)).
/// ω = 0 returns the unconditional prediction exactly.
pub fn guided_noise(
    tau: &TrajStreams,
    k: usize,
    guidance: &GuidanceConfig,
    params: &DenoiserParams,
) -> Result<NoisePrediction> {
    let uncond = params.predict_noise(tau, &ConditionInput::unconditional(k))?;
    if guidance.omega == 0.0 {
        return Ok(uncond);
    }
    let cond = params.predict_noise(tau, &ConditionInput::with_return(k, guidance.r_target))?;
    let blend = |u: &Tensor, c: &Tensor| -> Tensor {
        let data = u
            .data()
            .iter()
            .zip(c.data())
            .map(|(uv, cv)| uv + guidance.omega * (cv - uv))
            .collect();
        Tensor::from_raw(u.shape().to_vec(), data)
    };
    Ok(NoisePrediction {
        y_s: blend(&uncond.y_s, &cond.y_s),
        y_a: blend(&uncond.y_a, &cond.y_a),
        y_r: match (&uncond.y_r, &cond.y_r) {
            (Some(u), Some(c)) => Some(blend(u, c)),
            _ => None,
        },
    })
}

fn predict(
    tau: &TrajStreams,
    k: usize,
    guidance: Option<&GuidanceConfig>,
    params: &DenoiserParams,
) -> Result<NoisePrediction> {
    match guidance {
        Some(g) => guided_noise(tau, k, g, params),
        None => params.predict_noise(tau, &ConditionInput::unconditional(k)),
    }
}

fn randn_like(t: &Tensor, rng: &mut impl Rng) -> Tensor {
    Tensor::randn(t.shape(), rng)
}

fn draw_streams(like: &TrajStreams, rng: &mut impl Rng) -> TrajStreams {
    TrajStreams {
        states: randn_like(&like.states, rng),
        actions: randn_like(&like.actions, rng),
        rewards: like.rewards.as_ref().map(|r| randn_like(r, rng)),
    }
}

fn forward_streams(
    x0: &TrajStreams,
    k: usize,
    eps: &TrajStreams,
    sched: &NoiseSchedule,
) -> Result<TrajStreams> {
    Ok(TrajStreams {
        states: sched.forward_sample(&x0.states, k, &eps.states)?,
        actions: sched.forward_sample(&x0.actions, k, &eps.actions)?,
        rewards: match (&x0.rewards, &eps.rewards) {
            (Some(r), Some(e)) => Some(sched.forward_sample(r, k, e)?),
            (None, None) => None,
            _ => return Err(Error::dimension("reward stream/noise mismatch")),
        },
    })
}

fn reverse_streams(
    pred: &NoisePrediction,
    x: &TrajStreams,
    k: usize,
    inj: &TrajStreams,
    sched: &NoiseSchedule,
) -> Result<TrajStreams> {
    Ok(TrajStreams {
        states: sched.reverse_step(&pred.y_s, &x.states, k, &inj.states)?,
        actions: sched.reverse_step(&pred.y_a, &x.actions, k, &inj.actions)?,
        rewards: match (&pred.y_r, &x.rewards, &inj.rewards) {
            (Some(yr), Some(xr), Some(ir)) => Some(sched.reverse_step(yr, xr, k, ir)?),
            (None, None, None) => None,
            _ => return Err(Error::dimension("reward stream mismatch in reverse step")),
        },
    })
}

/// Edit one normalized window in place through `iterations` rounds of
/// noise-then-denoise. The normalized anchor is rewritten after every forward
/// noising and every reverse step when anchoring is on.
fn edit_normalized(
    mut x0: TrajStreams,
    anchor_norm: Option<&crate::training::Anchor>,
    k_steps: usize,
    cfg: &EditConfig,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<TrajStreams> {
    for _ in 0..cfg.iterations {
        let eps = draw_streams(&x0, rng);
        let mut x = forward_streams(&x0, k_steps, &eps, sched)?;
        if let Some(a) = anchor_norm {
            a.apply(&mut x);
        }
        for k in (1..=k_steps).rev() {
            let pred = predict(&x, k, cfg.guidance.as_ref(), params)?;
            let inj = if k > 1 {
                draw_streams(&x, rng)
            } else {
                TrajStreams {
                    states: Tensor::zeros(x.states.shape()),
                    actions: Tensor::zeros(x.actions.shape()),
                    rewards: x.rewards.as_ref().map(|r| Tensor::zeros(r.shape())),
                }
            };
            x = reverse_streams(&pred, &x, k, &inj, sched)?;
            if let Some(a) = anchor_norm {
                a.apply(&mut x);
            }
        }
        x0 = x;
    }
    Ok(x0)
}

fn edit_one_window(
    idx: usize,
    w: &Window,
    params: &DenoiserParams,
    normalizer: &Normalizer,
    cfg: &EditConfig,
    sched: &NoiseSchedule,
    k_steps: usize,
) -> Result<Window> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(idx as u64);
    let normed = normalizer.normalize_window(w);
    let anchor_norm = cfg.anchor_enabled.then(|| normed.anchor.clone());
    let edited_norm = edit_normalized(
        normed.streams.clone(),
        anchor_norm.as_ref(),
        k_steps,
        cfg,
        params,
        sched,
        &mut rng,
    )?;
    let mut streams = normalizer.denormalize_streams(&edited_norm);
    if cfg.anchor_enabled {
        // write the untouched raw anchor back so the initial transition is
        // preserved bit-exactly, not merely up to normalization round-trip
        w.anchor.apply(&mut streams);
    }
    Ok(Window::new(streams, w.ret))
}

fn edit_with<M>(
    windows: &[Window],
    params: &DenoiserParams,
    normalizer: &Normalizer,
    cfg: &EditConfig,
    sched: &NoiseSchedule,
    mapper: M,
) -> Result<EditOutcome>
where
    M: Fn(&[Window], &(dyn Fn(usize, &Window) -> Result<Window> + Sync)) -> Vec<Result<Window>>,
{
    cfg.validate()?;
    if params.config().horizon != windows.first().map_or(params.config().horizon, |w| w.horizon()) {
        return Err(Error::config(format!(
            "checkpoint horizon {} does not match window horizon {}",
            params.config().horizon,
            windows[0].horizon()
        )));
    }
    let k_steps = cfg.k_steps(sched.len());
    if k_steps == 0 {
        return Ok(EditOutcome {
            windows: windows.to_vec(),
            k_steps: 0,
            reverse_steps_per_window: 0,
        });
    }
    let f = |i: usize, w: &Window| edit_one_window(i, w, params, normalizer, cfg, sched, k_steps);
    let results = mapper(windows, &f);
    let mut out = Vec::with_capacity(results.len());
    for r in results {
        out.push(r?);
    }
    Ok(EditOutcome {
        windows: out,
        k_steps,
        reverse_steps_per_window: k_steps * cfg.iterations,
    })
}

/// Edit source windows toward the target prior. Windows are independent;
/// each gets its own RNG stream derived from (seed, window index), so
/// parallel and sequential execution produce identical output.
pub fn edit(
    windows: &[Window],
    params: &DenoiserParams,
    normalizer: &Normalizer,
    cfg: &EditConfig,
    sched: &NoiseSchedule,
) -> Result<EditOutcome> {
    edit_with(windows, params, normalizer, cfg, sched, |ws, f| {
        exec::map_indexed(ws, f)
    })
}

/// Sequential editing path (same output as [`edit`]); kept callable for
/// benchmarks and the parallel/serial equivalence check.
pub fn edit_sequential(
    windows: &[Window],
    params: &DenoiserParams,
    normalizer: &Normalizer,
    cfg: &EditConfig,
    sched: &NoiseSchedule,
) -> Result<EditOutcome> {
    edit_with(windows, params, normalizer, cfg, sched, |ws, f| {
        exec::map_indexed_seq(ws, f)
    })
}

/// Generate windows from pure noise with the full reverse chain. Anchors are
/// drawn uniformly from the target windows' initial transitions and held
/// fixed through the chain.
pub fn generate(
    n_windows: usize,
    params: &DenoiserParams,
    normalizer: &Normalizer,
    target_windows: &[Window],
    guidance: Option<GuidanceConfig>,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<Window>> {
    if target_windows.is_empty() {
        return Err(Error::config("generation needs target windows for anchors"));
    }
    let cfg_model = params.config();
    let h = cfg_model.horizon;
    let template = TrajStreams {
        states: Tensor::zeros(&[h, cfg_model.dim_s]),
        actions: Tensor::zeros(&[h, cfg_model.dim_a]),
        rewards: cfg_model.reward_enabled.then(|| Tensor::zeros(&[h, 1])),
    };
    // anchor choices drawn up front so parallel generation stays deterministic
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let anchor_idx: Vec<usize> = (0..n_windows)
        .map(|_| master.gen_range(0..target_windows.len()))
        .collect();

    let k_total = sched.len();
    let edit_cfg = EditConfig {
        kappa: 1.0,
        iterations: 1,
        guidance,
        anchor_enabled: true,
        seed,
    };
    let results: Vec<Result<Window>> = exec::map_range(n_windows, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let raw_anchor = &target_windows[anchor_idx[i]].anchor;
        let anchor_norm = {
            let w = normalizer.normalize_window(&target_windows[anchor_idx[i]]);
            w.anchor
        };
        // pure noise start
        let mut x = draw_streams(&template, &mut rng);
        anchor_norm.apply(&mut x);
        for k in (1..=k_total).rev() {
            let pred = predict(&x, k, edit_cfg.guidance.as_ref(), params)?;
            let inj = if k > 1 {
                draw_streams(&x, &mut rng)
            } else {
                TrajStreams {
                    states: Tensor::zeros(x.states.shape()),
                    actions: Tensor::zeros(x.actions.shape()),
                    rewards: x.rewards.as_ref().map(|r| Tensor::zeros(r.shape())),
                }
            };
            x = reverse_streams(&pred, &x, k, &inj, sched)?;
            anchor_norm.apply(&mut x);
        }
        let mut streams = normalizer.denormalize_streams(&x);
        raw_anchor.apply(&mut streams);
        Ok(Window::new(streams, None))
    });
    let mut out = Vec::with_capacity(n_windows);
    for r in results {
        out.push(r?);
    }
    Ok(out)
}

/// S4RL-style augmentation baseline: independent Gaussian noise with variance
/// `sigma2` on every state entry. Actions and rewards are untouched.
pub fn s4rl_augment(windows: &[Window], sigma2: f64, seed: u64) -> Result<Vec<Window>> {
    if sigma2 <= 0.0 {
        return Err(Error::config("sigma2 must be positive"));
    }
    let std = sigma2.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(windows
        .iter()
        .map(|w| {
            let mut states = w.streams.states.clone();
            for v in states.data_mut() {
                *v += std * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
            Window::new(
                TrajStreams {
                    states,
                    actions: w.streams.actions.clone(),
                    rewards: w.streams.rewards.clone(),
                },
                w.ret,
            )
        })
        .collect())
}

/// Mean squared displacement between paired window sets, over every entry of
/// every stream.
pub fn mean_squared_displacement(a: &[Window], b: &[Window]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    let mut n = 0usize;
    for (wa, wb) in a.iter().zip(b) {
        let mut add = |x: &Tensor, y: &Tensor| {
            for (p, q) in x.data().iter().zip(y.data()) {
                acc += (p - q) * (p - q);
            }
            n += x.numel();
        };
        add(&wa.streams.states, &wb.streams.states);
        add(&wa.streams.actions, &wb.streams.actions);
        if let (Some(ra), Some(rb)) = (&wa.streams.rewards, &wb.streams.rewards) {
            add(ra, rb);
        }
    }
    acc / n as f64
}
