//! Attention blocks with adaptive layer-norm conditioning.
//!
//! Parameters live in a flat tensor store; block structs hold indices into
//! it. [`Ctx`] pairs a recording [`Graph`] with the store and caches the leaf
//! var for each parameter so gradients can be collected per store slot.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use rand::Rng;

/// Graph plus parameter-store binding for one forward recording.
pub struct Ctx<'p> {
    pub g: Graph<'p>,
    store: &'p [Tensor],
    vars: Vec<Option<Var>>,
}

impl<'p> Ctx<'p> {
    pub fn new(store: &'p [Tensor]) -> Self {
        Self {
            g: Graph::new(),
            store,
            vars: vec![None; store.len()],
        }
    }

    /// Leaf var for parameter `idx`, reused across the recording.
    pub fn param(&mut self, idx: usize) -> Var {
        if let Some(v) = self.vars[idx] {
            return v;
        }
        let v = self.g.leaf(&self.store[idx]);
        self.vars[idx] = Some(v);
        v
    }

    /// Per-slot gradients after backward; zeros for parameters the root never
    /// reached.
    pub fn grads(&self) -> Vec<Tensor> {
        self.store
            .iter()
            .zip(self.vars.iter())
            .map(|(t, v)| match v {
                Some(var) => self
                    .g
                    .grad(*var)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape())),
                None => Tensor::zeros(t.shape()),
            })
            .collect()
    }
}

/// Initialization scheme for a parameter tensor.
#[derive(Clone, Copy)]
pub enum Init {
    Zero,
    Glorot,
    Normal(f64),
}

/// Accumulates parameter tensors during network construction. The order of
/// `tensor` calls defines the checkpoint serialization order.
pub struct ParamBuilder<'r, R: Rng> {
    store: Vec<Tensor>,
    rng: &'r mut R,
}

impl<'r, R: Rng> ParamBuilder<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Self { store: Vec::new(), rng }
    }

    pub fn tensor(&mut self, shape: &[usize], init: Init) -> usize {
        let t = match init {
            Init::Zero => Tensor::zeros(shape),
            Init::Normal(std) => Tensor::randn_scaled(shape, std, self.rng),
            Init::Glorot => {
                let (fan_in, fan_out) = match shape {
                    [i, o] => (*i, *o),
                    other => {
                        let n = other.iter().product::<usize>();
                        (n, n)
                    }
                };
                let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::randn_scaled(shape, std, self.rng)
            }
        };
        self.store.push(t);
        self.store.len() - 1
    }

    pub fn finish(self) -> Vec<Tensor> {
        self.store
    }
}

// ── dense layers ────────────────────────────────────────────────────────

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Dense {
    pub w: usize,
    pub b: usize,
}

impl Dense {
    pub fn build<R: Rng>(b: &mut ParamBuilder<R>, fan_in: usize, fan_out: usize, init: Init) -> Self {
        Self {
            w: b.tensor(&[fan_in, fan_out], init),
            b: b.tensor(&[1, fan_out], Init::Zero),
        }
    }

    pub fn apply(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.param(self.w);
        let bias = cx.param(self.b);
        cx.g.dense(x, w, bias)
    }

    pub(crate) fn indices(&self) -> Vec<usize> {
        vec![self.w, self.b]
    }
}

/// Two dense layers with the smooth SiLU between: the paper's encoder,
/// decoder, and feed-forward shape.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Mlp2 {
    pub l1: Dense,
    pub l2: Dense,
}

impl Mlp2 {
    pub fn build<R: Rng>(b: &mut ParamBuilder<R>, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Self {
            l1: Dense::build(b, d_in, d_hidden, Init::Glorot),
            l2: Dense::build(b, d_hidden, d_out, Init::Glorot),
        }
    }

    pub fn apply(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.l1.apply(cx, x)?;
        let h = cx.g.silu(h);
        self.l2.apply(cx, h)
    }

    pub(crate) fn indices(&self) -> Vec<usize> {
        [self.l1.indices(), self.l2.indices()].concat()
    }
}

// ── multi-head attention with projections ───────────────────────────────

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AttnProj {
    pub wq: Dense,
    pub wk: Dense,
    pub wv: Dense,
    pub wo: Dense,
    pub heads: usize,
}

impl AttnProj {
    /// q projects from `d_q`, k/v from `d_kv`; attention runs at width
    /// `d_attn` (a multiple of `heads`) and the output projects back to `d_kv`.
    pub fn build<R: Rng>(
        b: &mut ParamBuilder<R>,
        d_q: usize,
        d_kv: usize,
        d_attn: usize,
        heads: usize,
    ) -> Self {
        assert_eq!(d_attn % heads, 0);
        Self {
            wq: Dense::build(b, d_q, d_attn, Init::Glorot),
            wk: Dense::build(b, d_kv, d_attn, Init::Glorot),
            wv: Dense::build(b, d_kv, d_attn, Init::Glorot),
            wo: Dense::build(b, d_attn, d_kv, Init::Glorot),
            heads,
        }
    }

    pub fn apply(&self, cx: &mut Ctx, x_q: Var, x_kv: Var) -> Result<Var> {
        let q = self.wq.apply(cx, x_q)?;
        let k = self.wk.apply(cx, x_kv)?;
        let v = self.wv.apply(cx, x_kv)?;
        let qh = cx.g.split_heads(q, self.heads)?;
        let kh = cx.g.split_heads(k, self.heads)?;
        let vh = cx.g.split_heads(v, self.heads)?;
        let att = cx.g.attention(qh, kh, vh)?;
        let merged = cx.g.merge_heads(att)?;
        self.wo.apply(cx, merged)
    }

    pub(crate) fn indices(&self) -> Vec<usize> {
        [
            self.wq.indices(),
            self.wk.indices(),
            self.wv.indices(),
            self.wo.indices(),
        ]
        .concat()
    }
}

// ── self-attention block ────────────────────────────────────────────────

/// Pre-norm self-attention block with scale/shift/gate modulation:
///
/// z = mod(e); q=k=v = LN(x)·(1+z_scale)+z_shift;
/// x += z_gate_attn · Attn(q,q,q); x += z_gate_mlp · FFN(LN(x)·(1+z_scale)+z_shift)
///
/// The modulation head is zero-initialized, so a fresh block is the identity
/// on its residual stream.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SelfBlock {
    pub modulation: Dense,
    pub attn: AttnProj,
    pub ffn: Mlp2,
    pub width: usize,
}

impl SelfBlock {
    pub fn build<R: Rng>(
        b: &mut ParamBuilder<R>,
        width: usize,
        cond_dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        Self {
            modulation: Dense::build(b, cond_dim, 4 * width, Init::Zero),
            attn: AttnProj::build(b, width, width, width, heads),
            ffn: Mlp2::build(b, width, mlp_ratio * width, width),
            width,
        }
    }

    pub fn apply(&self, cx: &mut Ctx, x: Var, e: Var) -> Result<Var> {
        let d = self.width;
        if cx.g.value(x).cols() != d {
            return Err(Error::dimension(format!(
                "self block width {} got input width {}",
                d,
                cx.g.value(x).cols()
            )));
        }
        let se = cx.g.silu(e);
        let z = self.modulation.apply(cx, se)?;
        let scale = cx.g.slice_cols(z, 0, d)?;
        let shift = cx.g.slice_cols(z, d, d)?;
        let gate_attn = cx.g.slice_cols(z, 2 * d, d)?;
        let gate_mlp = cx.g.slice_cols(z, 3 * d, d)?;

        let n1 = cx.g.layer_norm(x)?;
        let qkv = cx.g.modulate(n1, scale, shift)?;
        let att = self.attn.apply(cx, qkv, qkv)?;
        let x1 = cx.g.gated_add(x, gate_attn, att)?;

        let n2 = cx.g.layer_norm(x1)?;
        let m2 = cx.g.modulate(n2, scale, shift)?;
        let f = self.ffn.apply(cx, m2)?;
        cx.g.gated_add(x1, gate_mlp, f)
    }

    pub(crate) fn indices(&self) -> Vec<usize> {
        [
            self.modulation.indices(),
            self.attn.indices(),
            self.ffn.indices(),
        ]
        .concat()
    }
}

// ── cross-attention block ───────────────────────────────────────────────

/// Cross-attention block updating the kv stream.
///
/// Queries come from the modulated `x_q` stream, keys/values from the
/// modulated `x_kv` stream, and both residual updates land on `x_kv`, so the
/// query stream is never written — this is what gives the reward path its
/// one-way dependency. The condition splits into `c_q`/`c_kv` through two
/// dense heads of the shared embedding.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CrossBlock {
    pub cond_q: Dense,
    pub cond_kv: Dense,
    pub mod_q: Dense,
    pub mod_kv: Dense,
    pub attn: AttnProj,
    pub ffn: Mlp2,
    pub d_q: usize,
    pub d_kv: usize,
}

impl CrossBlock {
    pub fn build<R: Rng>(
        b: &mut ParamBuilder<R>,
        d_q: usize,
        d_kv: usize,
        cond_dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        assert_eq!(d_kv % heads, 0, "kv stream width must divide into heads");
        Self {
            cond_q: Dense::build(b, cond_dim, cond_dim, Init::Glorot),
            cond_kv: Dense::build(b, cond_dim, cond_dim, Init::Glorot),
            mod_q: Dense::build(b, cond_dim, 2 * d_q, Init::Zero),
            mod_kv: Dense::build(b, cond_dim, 4 * d_kv, Init::Zero),
            attn: AttnProj::build(b, d_q, d_kv, d_kv, heads),
            ffn: Mlp2::build(b, d_kv, mlp_ratio * d_kv, d_kv),
            d_q,
            d_kv,
        }
    }

    /// Returns the updated kv stream, shape `[L_kv × d_kv]`. `x_q` must have
    /// either the same length as `x_kv` or a single row (broadcast).
    pub fn apply(&self, cx: &mut Ctx, x_q: Var, x_kv: Var, e: Var) -> Result<Var> {
        let (dq, dkv) = (self.d_q, self.d_kv);
        let got_q = cx.g.value(x_q).shape().to_vec();
        let got_kv = cx.g.value(x_kv).shape().to_vec();
        if got_q[1] != dq || got_kv[1] != dkv {
            return Err(Error::dimension(format!(
                "cross block built for widths q={dq}, kv={dkv}; got q={got_q:?}, kv={got_kv:?}"
            )));
        }
        if got_q[0] != got_kv[0] && got_q[0] != 1 {
            return Err(Error::dimension(format!(
                "cross block residual needs L_q == L_kv (or L_q == 1); got q={got_q:?}, kv={got_kv:?}"
            )));
        }

        let se = cx.g.silu(e);
        let cq = self.cond_q.apply(cx, se)?;
        let cq = cx.g.silu(cq);
        let ckv = self.cond_kv.apply(cx, se)?;
        let ckv = cx.g.silu(ckv);
        let zq = self.mod_q.apply(cx, cq)?;
        let zkv = self.mod_kv.apply(cx, ckv)?;
        let q_scale = cx.g.slice_cols(zq, 0, dq)?;
        let q_shift = cx.g.slice_cols(zq, dq, dq)?;
        let kv_scale = cx.g.slice_cols(zkv, 0, dkv)?;
        let kv_shift = cx.g.slice_cols(zkv, dkv, dkv)?;
        let gate_attn = cx.g.slice_cols(zkv, 2 * dkv, dkv)?;
        let gate_mlp = cx.g.slice_cols(zkv, 3 * dkv, dkv)?;

        let nq = cx.g.layer_norm(x_q)?;
        let q_in = cx.g.modulate(nq, q_scale, q_shift)?;
        let nkv = cx.g.layer_norm(x_kv)?;
        let kv_in = cx.g.modulate(nkv, kv_scale, kv_shift)?;
        let att = self.attn.apply(cx, q_in, kv_in)?;
        let x1 = cx.g.gated_add(x_kv, gate_attn, att)?;

        let n2 = cx.g.layer_norm(x1)?;
        let m2 = cx.g.modulate(n2, kv_scale, kv_shift)?;
        let f = self.ffn.apply(cx, m2)?;
        cx.g.gated_add(x1, gate_mlp, f)
    }

    pub(crate) fn indices(&self) -> Vec<usize> {
        [
            self.cond_q.indices(),
            self.cond_kv.indices(),
            self.mod_q.indices(),
            self.mod_kv.indices(),
            self.attn.indices(),
            self.ffn.indices(),
        ]
        .concat()
    }
}

/// Sinusoidal embedding of the noise step, standard interleaved sin/cos.
pub fn sinusoidal_embedding(k: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; dim];
    let half = dim / 2;
    for i in 0..half {
        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        data[2 * i] = (k as f64 * freq).sin();
        data[2 * i + 1] = (k as f64 * freq).cos();
    }
    Tensor::from_raw(vec![1, dim], data)
}
