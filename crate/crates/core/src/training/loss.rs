//! Diffusion training loss with initial-transition anchoring.
//!
//! Per sample: draw k uniformly, draw ε, form τ_k from the closed-form
//! marginal, overwrite timestep 0 with the clean anchor, and regress the
//! predicted noise onto ε over timesteps 1..H−1. Timestep 0 is excluded from
//! the loss: its target noise is undefined under anchoring.

use super::window::Window;
use crate::error::{Error, Result};
use crate::exec;
use crate::model::{ConditionInput, DenoiserParams, TrajStreams};
use crate::numerics::Tensor;
use crate::schedule::NoiseSchedule;
use rand::Rng;

/// Randomness for one training sample, drawn up front so batch evaluation can
/// run in parallel without touching the RNG.
#[derive(Debug, Clone)]
pub struct SampleDraw {
    pub window_idx: usize,
    pub k: usize,
    pub eps: TrajStreams,
    pub cond: ConditionInput,
}

/// Draw (k, ε, condition) for one window from the master RNG.
pub fn draw_sample(
    window_idx: usize,
    window: &Window,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    conditional: bool,
    rng: &mut impl Rng,
) -> SampleDraw {
    let cfg = params.config();
    let h = cfg.horizon;
    let k = rng.gen_range(1..=sched.len());
    let eps = TrajStreams {
        states: Tensor::randn(&[h, cfg.dim_s], rng),
        actions: Tensor::randn(&[h, cfg.dim_a], rng),
        rewards: cfg.reward_enabled.then(|| Tensor::randn(&[h, 1], rng)),
    };
    let cond = if conditional {
        match window.ret {
            Some(r) if !rng.gen_bool(cfg.cfg_dropout) => ConditionInput::with_return(k, r),
            _ => ConditionInput::unconditional(k),
        }
    } else {
        ConditionInput::unconditional(k)
    };
    SampleDraw {
        window_idx,
        k,
        eps,
        cond,
    }
}

/// τ_k from the closed-form marginal with the clean anchor written back over
/// timestep 0.
pub fn anchored_noised(
    window: &Window,
    k: usize,
    eps: &TrajStreams,
    sched: &NoiseSchedule,
) -> Result<TrajStreams> {
    let mut noised = TrajStreams {
        states: sched.forward_sample(&window.streams.states, k, &eps.states)?,
        actions: sched.forward_sample(&window.streams.actions, k, &eps.actions)?,
        rewards: match (&window.streams.rewards, &eps.rewards) {
            (Some(r), Some(er)) => Some(sched.forward_sample(r, k, er)?),
            (None, None) => None,
            _ => return Err(Error::dimension("reward stream/noise mismatch")),
        },
    };
    window.anchor.apply(&mut noised);
    Ok(noised)
}

/// Mask tensor zeroing timestep 0: `[H×d]`, first row 0, rest 1.
fn t0_mask(h: usize, d: usize) -> Tensor {
    let mut m = Tensor::full(&[h, d], 1.0);
    for v in &mut m.data_mut()[..d] {
        *v = 0.0;
    }
    m
}

/// Pure loss between a prediction and the true noise: sum of squared error
/// over timesteps 1..H−1 and all streams, divided by H−1. Zero iff the
/// prediction matches ε on every unmasked position.
pub fn masked_eps_loss(pred: &TrajStreams, eps: &TrajStreams) -> f64 {
    let h = pred.states.rows();
    let mut acc = 0.0;
    let mut add = |p: &Tensor, e: &Tensor| {
        let d = p.cols();
        for r in 1..h {
            for (a, b) in p.row(r).iter().zip(e.row(r)) {
                acc += (a - b) * (a - b);
            }
        }
        let _ = d;
    };
    add(&pred.states, &eps.states);
    add(&pred.actions, &eps.actions);
    if let (Some(pr), Some(er)) = (&pred.rewards, &eps.rewards) {
        add(pr, er);
    }
    acc / (h - 1) as f64
}

fn build_sample_loss<'p>(
    window: &Window,
    draw: &'p SampleDraw,
    params: &'p DenoiserParams,
    sched: &NoiseSchedule,
) -> Result<(crate::model::Ctx<'p>, crate::numerics::Var)> {
    let cfg = params.config();
    let h = cfg.horizon;
    let noised = anchored_noised(window, draw.k, &draw.eps, sched)?;

    let mut cx = params.ctx();
    let (ys, ya, yr) = params.forward(&mut cx, &noised, &draw.cond)?;

    let mask_s = t0_mask(h, cfg.dim_s);
    let mask_a = t0_mask(h, cfg.dim_a);
    let es = cx.g.leaf(&draw.eps.states);
    let ea = cx.g.leaf(&draw.eps.actions);

    let ds = cx.g.sub(ys, es)?;
    let ds = cx.g.apply_mask(ds, &mask_s)?;
    let ss = cx.g.mul(ds, ds)?;
    let mut total = cx.g.sum_all(ss);

    let da = cx.g.sub(ya, ea)?;
    let da = cx.g.apply_mask(da, &mask_a)?;
    let sa = cx.g.mul(da, da)?;
    let sum_a = cx.g.sum_all(sa);
    total = cx.g.add(total, sum_a)?;

    if let (Some(yr), Some(er_t)) = (yr, &draw.eps.rewards) {
        let mask_r = t0_mask(h, 1);
        let er = cx.g.leaf(er_t);
        let dr = cx.g.sub(yr, er)?;
        let dr = cx.g.apply_mask(dr, &mask_r)?;
        let sr = cx.g.mul(dr, dr)?;
        let sum_r = cx.g.sum_all(sr);
        total = cx.g.add(total, sum_r)?;
    }

    let loss = cx.g.scale(total, 1.0 / (h - 1) as f64);
    let loss_val = cx.g.value(loss).data()[0];
    if !loss_val.is_finite() {
        return Err(Error::Divergence(format!(
            "non-finite loss at window {}, noise step k={}",
            draw.window_idx, draw.k
        )));
    }
    Ok((cx, loss))
}

/// Loss value only (no backward); used by finite-difference checks.
pub fn sample_loss_value(
    window: &Window,
    draw: &SampleDraw,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let (cx, loss) = build_sample_loss(window, draw, params, sched)?;
    Ok(cx.g.value(loss).data()[0])
}

/// Loss and parameter gradients for one sample.
pub fn sample_loss_and_grads(
    window: &Window,
    draw: &SampleDraw,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
) -> Result<(f64, Vec<Tensor>)> {
    let (mut cx, loss) = build_sample_loss(window, draw, params, sched)?;
    let loss_val = cx.g.value(loss).data()[0];
    cx.g.backward(loss)?;
    Ok((loss_val, cx.grads()))
}

/// Batch loss: mean of per-sample losses, mean of per-sample gradients.
/// Samples evaluate in parallel; the reduction runs in index order so the
/// result is identical to the sequential path.
pub fn diffusion_loss_batch(
    windows: &[Window],
    draws: &[SampleDraw],
    params: &DenoiserParams,
    sched: &NoiseSchedule,
) -> Result<(f64, Vec<Tensor>)> {
    if draws.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let results: Vec<Result<(f64, Vec<Tensor>)>> = exec::map_indexed(draws, |_, draw| {
        sample_loss_and_grads(&windows[draw.window_idx], draw, params, sched)
    });

    let inv = 1.0 / draws.len() as f64;
    let mut loss_acc = 0.0;
    let mut grad_acc: Option<Vec<Tensor>> = None;
    for r in results {
        let (l, g) = r?;
        loss_acc += l;
        match &mut grad_acc {
            None => grad_acc = Some(g),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g.iter()) {
                    a.add_assign(b);
                }
            }
        }
    }
    let mut grads = grad_acc.expect("non-empty batch");
    for g in &mut grads {
        g.scale_in_place(inv);
    }
    Ok((loss_acc * inv, grads))
}
