//! The dependency-structured trajectory denoiser ε(τ_k, k, c).
//!
//! States, actions, and rewards are encoded separately, self-attended for
//! temporal structure, cross-attended for their mutual dependencies, and
//! decoded separately back to element widths. The reward stream is queried by
//! the concatenated state–action features and never feeds back into them.

use super::blocks::{sinusoidal_embedding, CrossBlock, Ctx, Dense, Init, Mlp2, ParamBuilder, SelfBlock};
use super::config::{DenoiserConfig, SIN_DIM};
use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One window's stream tensors: states `[H×dim_s]`, actions `[H×dim_a]`,
/// rewards `[H×1]` when present.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajStreams {
    pub states: Tensor,
    pub actions: Tensor,
    pub rewards: Option<Tensor>,
}

impl TrajStreams {
    pub fn validate(&self, cfg: &DenoiserConfig) -> Result<()> {
        let h = cfg.horizon;
        if self.states.shape() != [h, cfg.dim_s] {
            return Err(Error::dimension(format!(
                "states shape {:?}, expected [{h}, {}]",
                self.states.shape(),
                cfg.dim_s
            )));
        }
        if self.actions.shape() != [h, cfg.dim_a] {
            return Err(Error::dimension(format!(
                "actions shape {:?}, expected [{h}, {}]",
                self.actions.shape(),
                cfg.dim_a
            )));
        }
        match (&self.rewards, cfg.reward_enabled) {
            (Some(r), true) => {
                if r.shape() != [h, 1] {
                    return Err(Error::dimension(format!(
                        "rewards shape {:?}, expected [{h}, 1]",
                        r.shape()
                    )));
                }
            }
            (None, false) => {}
            (Some(_), false) => {
                return Err(Error::config(
                    "reward stream supplied but the model is reward-free",
                ))
            }
            (None, true) => {
                return Err(Error::config(
                    "model expects a reward stream but none was supplied",
                ))
            }
        }
        Ok(())
    }
}

/// Conditioning for one forward pass: the noise step plus either a normalized
/// return or the learned null token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionInput {
    pub k: usize,
    pub ret: Option<f64>,
}

impl ConditionInput {
    pub fn with_return(k: usize, ret: f64) -> Self {
        Self { k, ret: Some(ret) }
    }

    pub fn unconditional(k: usize) -> Self {
        Self { k, ret: None }
    }

    fn validate(&self) -> Result<()> {
        if let Some(r) = self.ret {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Validation(format!(
                    "normalized return {r} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Predicted per-stream noise, mirroring the input stream shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePrediction {
    pub y_s: Tensor,
    pub y_a: Tensor,
    pub y_r: Option<Tensor>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct CondEncoder {
    proj: Dense,
    null_token: usize,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct DenoiserNet {
    cond: CondEncoder,
    enc_s: Mlp2,
    enc_a: Mlp2,
    enc_r: Option<Mlp2>,
    pos_s: usize,
    pos_a: usize,
    pos_r: Option<usize>,
    self_s: Vec<SelfBlock>,
    self_a: Vec<SelfBlock>,
    self_r: Vec<SelfBlock>,
    cross_s: CrossBlock,
    cross_a: CrossBlock,
    cross_r: Option<CrossBlock>,
    dec_s: Mlp2,
    dec_a: Mlp2,
    dec_r: Option<Mlp2>,
}

impl DenoiserNet {
    fn build<R: Rng>(cfg: &DenoiserConfig, b: &mut ParamBuilder<R>) -> Self {
        let (ws, wa, wr) = (cfg.width_s(), cfg.width_a(), cfg.width_r());
        let h = cfg.horizon;
        let cond = CondEncoder {
            proj: Dense::build(b, SIN_DIM + 1, cfg.cond_dim, Init::Glorot),
            null_token: b.tensor(&[1, 1], Init::Zero),
        };
        let enc_s = Mlp2::build(b, cfg.dim_s, ws, ws);
        let enc_a = Mlp2::build(b, cfg.dim_a, wa, wa);
        let enc_r = cfg.reward_enabled.then(|| Mlp2::build(b, 1, wr, wr));
        let pos_s = b.tensor(&[h, ws], Init::Normal(0.02));
        let pos_a = b.tensor(&[h, wa], Init::Normal(0.02));
        let pos_r = cfg.reward_enabled.then(|| b.tensor(&[h, wr], Init::Normal(0.02)));
        let self_s = (0..cfg.n_s)
            .map(|_| SelfBlock::build(b, ws, cfg.cond_dim, cfg.heads, cfg.mlp_ratio))
            .collect();
        let self_a = (0..cfg.n_a)
            .map(|_| SelfBlock::build(b, wa, cfg.cond_dim, cfg.heads, cfg.mlp_ratio))
            .collect();
        let self_r = if cfg.reward_enabled {
            (0..cfg.n_r)
                .map(|_| SelfBlock::build(b, wr, cfg.cond_dim, cfg.heads, cfg.mlp_ratio))
                .collect()
        } else {
            Vec::new()
        };
        // state stream updated with action queries, and vice versa
        let cross_s = CrossBlock::build(b, wa, ws, cfg.cond_dim, cfg.heads, cfg.mlp_ratio);
        let cross_a = CrossBlock::build(b, ws, wa, cfg.cond_dim, cfg.heads, cfg.mlp_ratio);
        // reward stream updated, queried by per-step [state, action] features
        let cross_r = cfg
            .reward_enabled
            .then(|| CrossBlock::build(b, ws + wa, wr, cfg.cond_dim, cfg.heads, cfg.mlp_ratio));
        let dec_s = Mlp2::build(b, ws, ws, cfg.dim_s);
        let dec_a = Mlp2::build(b, wa, wa, cfg.dim_a);
        let dec_r = cfg.reward_enabled.then(|| Mlp2::build(b, wr, wr, 1));
        Self {
            cond,
            enc_s,
            enc_a,
            enc_r,
            pos_s,
            pos_a,
            pos_r,
            self_s,
            self_a,
            self_r,
            cross_s,
            cross_a,
            cross_r,
            dec_s,
            dec_a,
            dec_r,
        }
    }
}

/// All learned weights plus the shape configuration.
#[derive(Debug, Clone)]
pub struct DenoiserParams {
    cfg: DenoiserConfig,
    net: DenoiserNet,
    store: Vec<Tensor>,
}

impl DenoiserParams {
    /// Deterministic initialization from a seed. Modulation heads start at
    /// zero, so every attention block is the identity map.
    pub fn init(cfg: &DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut rng);
        let net = DenoiserNet::build(cfg, &mut b);
        Ok(Self {
            cfg: cfg.clone(),
            net,
            store: b.finish(),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    /// Flat parameter tensors in checkpoint order.
    pub fn tensors(&self) -> &[Tensor] {
        &self.store
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.store
    }

    /// Replace the store (shapes must match). Used by checkpoint loading.
    pub fn set_tensors(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.store.len() {
            return Err(Error::Format(format!(
                "parameter count mismatch: {} in file, {} expected",
                tensors.len(),
                self.store.len()
            )));
        }
        for (new, old) in tensors.iter().zip(self.store.iter()) {
            if new.shape() != old.shape() {
                return Err(Error::Format(format!(
                    "parameter shape mismatch: {:?} in file, {:?} expected",
                    new.shape(),
                    old.shape()
                )));
            }
        }
        self.store = tensors;
        Ok(())
    }

    /// Add N(0, std²) noise to every parameter. Gradient checks use this to
    /// move off the zero-gate initialization so all paths carry signal.
    pub fn perturb_all(&mut self, std: f64, rng: &mut impl Rng) {
        for t in &mut self.store {
            let noise = Tensor::randn_scaled(t.shape(), std, rng);
            t.add_assign(&noise);
        }
    }

    /// Condition embedding e = Dense([sinusoidal(k); ret-or-null]).
    pub fn condition_embed_var(&self, cx: &mut Ctx, c: &ConditionInput) -> Result<Var> {
        c.validate()?;
        let sin = cx.g.leaf_owned(sinusoidal_embedding(c.k, SIN_DIM));
        let tok = match c.ret {
            Some(r) => cx.g.leaf_owned(Tensor::from_raw(vec![1, 1], vec![r])),
            None => cx.param(self.net.cond.null_token),
        };
        let cat = cx.g.concat_cols(sin, tok)?;
        self.net.cond.proj.apply(cx, cat)
    }

    /// Inference-only condition embedding.
    pub fn condition_embed(&self, c: &ConditionInput) -> Result<Tensor> {
        let mut cx = Ctx::new(&self.store);
        let e = self.condition_embed_var(&mut cx, c)?;
        Ok(cx.g.value(e).clone())
    }

    /// Encoders + positional embeddings + per-stream self-attention stacks.
    pub fn encode(
        &self,
        cx: &mut Ctx,
        tau: &TrajStreams,
        c: &ConditionInput,
    ) -> Result<(Var, Var, Var, Option<Var>)> {
        tau.validate(&self.cfg)?;
        let e = self.condition_embed_var(cx, c)?;

        let xs = cx.g.leaf_owned(tau.states.clone());
        let mut hs = self.net.enc_s.apply(cx, xs)?;
        let pos_s = cx.param(self.net.pos_s);
        hs = cx.g.add(hs, pos_s)?;
        for blk in &self.net.self_s {
            hs = blk.apply(cx, hs, e)?;
        }

        let xa = cx.g.leaf_owned(tau.actions.clone());
        let mut ha = self.net.enc_a.apply(cx, xa)?;
        let pos_a = cx.param(self.net.pos_a);
        ha = cx.g.add(ha, pos_a)?;
        for blk in &self.net.self_a {
            ha = blk.apply(cx, ha, e)?;
        }

        let hr = match (&tau.rewards, &self.net.enc_r) {
            (Some(r), Some(enc)) => {
                let xr = cx.g.leaf_owned(r.clone());
                let mut hr = enc.apply(cx, xr)?;
                let pos_r = cx.param(self.net.pos_r.expect("reward positional embedding"));
                hr = cx.g.add(hr, pos_r)?;
                for blk in &self.net.self_r {
                    hr = blk.apply(cx, hr, e)?;
                }
                Some(hr)
            }
            _ => None,
        };
        Ok((e, hs, ha, hr))
    }

    /// Cross-attention dependency stage. State and action streams exchange
    /// information symmetrically from the pre-cross features; the reward
    /// stream is updated from both and updates neither.
    pub fn cross_depend(
        &self,
        cx: &mut Ctx,
        e: Var,
        hs: Var,
        ha: Var,
        hr: Option<Var>,
    ) -> Result<(Var, Var, Option<Var>)> {
        let hs2 = self.net.cross_s.apply(cx, ha, hs, e)?;
        let ha2 = self.net.cross_a.apply(cx, hs, ha, e)?;
        let hr2 = match (hr, &self.net.cross_r) {
            (Some(hr), Some(blk)) => {
                let q = cx.g.concat_cols(hs, ha)?;
                Some(blk.apply(cx, q, hr, e)?)
            }
            (None, None) => None,
            _ => return Err(Error::config("reward stream/blocks mismatch")),
        };
        Ok((hs2, ha2, hr2))
    }

    /// Full forward to per-stream noise predictions, recording on `cx`.
    pub fn forward(
        &self,
        cx: &mut Ctx,
        tau: &TrajStreams,
        c: &ConditionInput,
    ) -> Result<(Var, Var, Option<Var>)> {
        let (e, hs, ha, hr) = self.encode(cx, tau, c)?;
        let (hs2, ha2, hr2) = self.cross_depend(cx, e, hs, ha, hr)?;
        let ys = self.net.dec_s.apply(cx, hs2)?;
        let ya = self.net.dec_a.apply(cx, ha2)?;
        let yr = match (hr2, &self.net.dec_r) {
            (Some(hr2), Some(dec)) => Some(dec.apply(cx, hr2)?),
            (None, None) => None,
            _ => return Err(Error::config("reward stream/decoder mismatch")),
        };
        Ok((ys, ya, yr))
    }

    /// Inference entry point: predicted noise for a normalized window.
    pub fn predict_noise(&self, tau: &TrajStreams, c: &ConditionInput) -> Result<NoisePrediction> {
        let mut cx = Ctx::new(&self.store);
        let (ys, ya, yr) = self.forward(&mut cx, tau, c)?;
        Ok(NoisePrediction {
            y_s: cx.g.value(ys).clone(),
            y_a: cx.g.value(ya).clone(),
            y_r: yr.map(|v| cx.g.value(v).clone()),
        })
    }

    /// Fresh recording context bound to this parameter store.
    pub fn ctx(&self) -> Ctx<'_> {
        Ctx::new(&self.store)
    }

    /// Store indices of every component shared between the full and the
    /// reward-free architecture, in construction order. Two models built with
    /// the same shape config (reward flag aside) list matching components at
    /// matching positions.
    pub fn shared_indices(&self) -> Vec<usize> {
        let n = &self.net;
        let mut out = n.cond.proj.indices();
        out.push(n.cond.null_token);
        out.extend(n.enc_s.indices());
        out.extend(n.enc_a.indices());
        out.push(n.pos_s);
        out.push(n.pos_a);
        for b in &n.self_s {
            out.extend(b.indices());
        }
        for b in &n.self_a {
            out.extend(b.indices());
        }
        out.extend(n.cross_s.indices());
        out.extend(n.cross_a.indices());
        out.extend(n.dec_s.indices());
        out.extend(n.dec_a.indices());
        out
    }

    #[cfg(test)]
    pub(crate) fn net_enc_s(&self) -> &super::blocks::Mlp2 {
        &self.net.enc_s
    }

    #[cfg(test)]
    pub(crate) fn net_pos_s(&self) -> usize {
        self.net.pos_s
    }
}
