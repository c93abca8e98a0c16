//! Dependency-structured trajectory denoiser.

pub mod blocks;
mod config;
mod denoiser;

pub use blocks::{sinusoidal_embedding, CrossBlock, Ctx, ParamBuilder, SelfBlock};
pub use config::{
    DenoiserConfig, DEFAULT_CFG_DROPOUT, DEFAULT_COND_DIM, DEFAULT_EMBED_MULTIPLIER,
    DEFAULT_HEADS, DEFAULT_MLP_RATIO, SIN_DIM,
};
pub use denoiser::{ConditionInput, DenoiserParams, NoisePrediction, TrajStreams};

#[cfg(test)]
mod tests {
    use super::blocks::{Init, ParamBuilder};
    use super::*;
    use crate::check::{central_diff, grad_close, FD_STEP};
    use crate::numerics::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn toy_cfg() -> DenoiserConfig {
        DenoiserConfig {
            horizon: 5,
            dim_s: 3,
            dim_a: 2,
            embed_multiplier: 4,
            cond_dim: 16,
            mlp_ratio: 2,
            ..DenoiserConfig::default()
        }
    }

    fn random_streams(cfg: &DenoiserConfig, r: &mut impl Rng) -> TrajStreams {
        TrajStreams {
            states: Tensor::randn(&[cfg.horizon, cfg.dim_s], r),
            actions: Tensor::randn(&[cfg.horizon, cfg.dim_a], r),
            rewards: cfg
                .reward_enabled
                .then(|| Tensor::randn(&[cfg.horizon, 1], r)),
        }
    }

    // ── condition embedding ─────────────────────────────────────────────

    #[test]
    fn condition_embed_is_deterministic() {
        let params = DenoiserParams::init(&toy_cfg(), 1).unwrap();
        let c = ConditionInput::with_return(42, 0.7);
        let a = params.condition_embed(&c).unwrap();
        let b = params.condition_embed(&c).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn condition_embed_distinguishes_noise_steps() {
        let params = DenoiserParams::init(&toy_cfg(), 1).unwrap();
        let a = params.condition_embed(&ConditionInput::unconditional(0)).unwrap();
        let b = params
            .condition_embed(&ConditionInput::unconditional(200))
            .unwrap();
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    #[test]
    fn condition_embed_rejects_return_outside_unit_interval() {
        let params = DenoiserParams::init(&toy_cfg(), 1).unwrap();
        assert!(params
            .condition_embed(&ConditionInput::with_return(1, 1.2))
            .is_err());
        assert!(params
            .condition_embed(&ConditionInput::with_return(1, -0.1))
            .is_err());
    }

    #[test]
    fn null_token_input_is_constant_across_steps() {
        // the condition half of the encoder input is the null token itself;
        // only the sinusoidal half varies with k
        let a = sinusoidal_embedding(3, SIN_DIM);
        let b = sinusoidal_embedding(9, SIN_DIM);
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    // ── self-attention block ────────────────────────────────────────────

    #[test]
    fn self_block_zero_gates_is_bit_exact_identity() {
        let mut r = rng(2);
        let mut b = ParamBuilder::new(&mut r);
        let blk = SelfBlock::build(&mut b, 8, 16, 4, 2);
        let store = b.finish();
        let x0 = Tensor::randn(&[5, 8], &mut r);
        let e0 = Tensor::randn(&[1, 16], &mut r);
        let mut cx = Ctx::new(&store);
        let x = cx.g.leaf(&x0);
        let e = cx.g.leaf(&e0);
        let y = blk.apply(&mut cx, x, e).unwrap();
        assert_eq!(cx.g.value(y), &x0);
    }

    #[test]
    fn self_block_with_unit_gates_is_plain_prenorm_block() {
        // zero modulation weights but gate biases forced to one: the block
        // must reduce to x + Attn(LN(x)) + FFN(LN(·))
        let mut r = rng(3);
        let mut b = ParamBuilder::new(&mut r);
        let blk = SelfBlock::build(&mut b, 8, 16, 4, 2);
        let mut store = b.finish();
        {
            let bias = &mut store[blk.modulation.b];
            for j in 2 * 8..4 * 8 {
                bias.data_mut()[j] = 1.0;
            }
        }
        let x0 = Tensor::randn(&[5, 8], &mut r);
        let e0 = Tensor::randn(&[1, 16], &mut r);

        let mut cx = Ctx::new(&store);
        let x = cx.g.leaf(&x0);
        let e = cx.g.leaf(&e0);
        let got = blk.apply(&mut cx, x, e).unwrap();
        let got = cx.g.value(got).clone();

        // same arithmetic out of plain primitives
        let mut cx2 = Ctx::new(&store);
        let x = cx2.g.leaf(&x0);
        let n1 = cx2.g.layer_norm(x).unwrap();
        let att = blk.attn.apply(&mut cx2, n1, n1).unwrap();
        let x1 = cx2.g.add(x, att).unwrap();
        let n2 = cx2.g.layer_norm(x1).unwrap();
        let f = blk.ffn.apply(&mut cx2, n2).unwrap();
        let want = cx2.g.add(x1, f).unwrap();
        assert!(got.max_abs_diff(cx2.g.value(want)) < 1e-14);
    }

    #[test]
    fn self_block_is_permutation_equivariant() {
        let mut r = rng(4);
        let mut b = ParamBuilder::new(&mut r);
        let blk = SelfBlock::build(&mut b, 8, 16, 4, 2);
        let mut store = b.finish();
        // densify modulation so the block actually does something
        for t in &mut store {
            let noise = Tensor::randn_scaled(t.shape(), 0.3, &mut r);
            t.add_assign(&noise);
        }
        let x0 = Tensor::randn(&[6, 8], &mut r);
        let e0 = Tensor::randn(&[1, 16], &mut r);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut xp_data = Vec::new();
        for &p in &perm {
            xp_data.extend_from_slice(x0.row(p));
        }
        let xp = Tensor::from_vec(vec![6, 8], xp_data).unwrap();

        let run = |input: &Tensor| {
            let mut cx = Ctx::new(&store);
            let x = cx.g.leaf(input);
            let e = cx.g.leaf(&e0);
            let y = blk.apply(&mut cx, x, e).unwrap();
            cx.g.value(y).clone()
        };
        let y = run(&x0);
        let yp = run(&xp);
        for (out_row, &src) in perm.iter().enumerate() {
            let a = yp.row(out_row);
            let b = y.row(*(&src));
            for (x, w) in a.iter().zip(b.iter()) {
                assert!((x - w).abs() < 1e-12);
            }
        }
    }

    // ── cross-attention block ───────────────────────────────────────────

    #[test]
    fn cross_block_zero_gates_returns_kv_stream() {
        let mut r = rng(5);
        let mut b = ParamBuilder::new(&mut r);
        let blk = CrossBlock::build(&mut b, 6, 8, 16, 4, 2);
        let store = b.finish();
        let xq = Tensor::randn(&[5, 6], &mut r);
        let xkv = Tensor::randn(&[5, 8], &mut r);
        let e0 = Tensor::randn(&[1, 16], &mut r);
        let mut cx = Ctx::new(&store);
        let (q, kv, e) = (cx.g.leaf(&xq), cx.g.leaf(&xkv), cx.g.leaf(&e0));
        let y = blk.apply(&mut cx, q, kv, e).unwrap();
        assert_eq!(cx.g.value(y), &xkv);

        // independent of x_q entirely while gates are zero
        let xq2 = Tensor::randn(&[5, 6], &mut r);
        let mut cx2 = Ctx::new(&store);
        let (q2, kv2, e2) = (cx2.g.leaf(&xq2), cx2.g.leaf(&xkv), cx2.g.leaf(&e0));
        let y2 = blk.apply(&mut cx2, q2, kv2, e2).unwrap();
        assert_eq!(cx2.g.value(y2), &xkv);
    }

    #[test]
    fn cross_block_width_mismatch_is_dimension_error() {
        let mut r = rng(6);
        let mut b = ParamBuilder::new(&mut r);
        let blk = CrossBlock::build(&mut b, 6, 8, 16, 4, 2);
        let store = b.finish();
        let xq = Tensor::randn(&[5, 8], &mut r); // wrong width for the q stream
        let xkv = Tensor::randn(&[5, 8], &mut r);
        let e0 = Tensor::randn(&[1, 16], &mut r);
        let mut cx = Ctx::new(&store);
        let (q, kv, e) = (cx.g.leaf(&xq), cx.g.leaf(&xkv), cx.g.leaf(&e0));
        assert!(blk.apply(&mut cx, q, kv, e).is_err());
    }

    /// Single query over two keys, hand-computed softmax oracle.
    #[test]
    fn cross_block_single_query_matches_hand_computation() {
        let d = 2usize;
        let mut r = rng(7);
        let mut b = ParamBuilder::new(&mut r);
        let blk = CrossBlock::build(&mut b, d, d, 4, 1, 2);
        let mut store = b.finish();
        // identity projections, attention gate one, everything else zero
        let eye = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        store[blk.attn.wq.w] = eye.clone();
        store[blk.attn.wk.w] = eye.clone();
        store[blk.attn.wv.w] = eye.clone();
        store[blk.attn.wo.w] = eye;
        store[blk.mod_kv.b].data_mut()[2 * d] = 1.0; // gate_attn, first column
        store[blk.mod_kv.b].data_mut()[2 * d + 1] = 1.0;

        let xq = Tensor::from_vec(vec![1, 2], vec![2.0, -1.0]).unwrap();
        let xkv = Tensor::from_vec(vec![2, 2], vec![3.0, 1.0, -0.5, 0.25]).unwrap();
        let e0 = Tensor::zeros(&[1, 4]);

        let mut cx = Ctx::new(&store);
        let (q, kv, e) = (cx.g.leaf(&xq), cx.g.leaf(&xkv), cx.g.leaf(&e0));
        let y = blk.apply(&mut cx, q, kv, e).unwrap();
        let got = cx.g.value(y).clone();

        // scalar oracle: layer norm, dot products, softmax, broadcast update
        let ln = |row: &[f64]| -> Vec<f64> {
            let m = (row[0] + row[1]) / 2.0;
            let var = ((row[0] - m).powi(2) + (row[1] - m).powi(2)) / 2.0;
            let s = (var + 1e-5).sqrt();
            vec![(row[0] - m) / s, (row[1] - m) / s]
        };
        let qn = ln(xq.row(0));
        let k1 = ln(xkv.row(0));
        let k2 = ln(xkv.row(1));
        let scale = 1.0 / (d as f64).sqrt();
        let s1 = (qn[0] * k1[0] + qn[1] * k1[1]) * scale;
        let s2 = (qn[0] * k2[0] + qn[1] * k2[1]) * scale;
        let z = s1.exp() + s2.exp();
        let (w1, w2) = (s1.exp() / z, s2.exp() / z);
        let update = [w1 * k1[0] + w2 * k2[0], w1 * k1[1] + w2 * k2[1]];
        for row in 0..2 {
            for col in 0..2 {
                let want = xkv.at2(row, col) + update[col];
                assert!(
                    (got.at2(row, col) - want).abs() < 1e-12,
                    "row {row} col {col}: {} vs {}",
                    got.at2(row, col),
                    want
                );
            }
        }
    }

    // ── encode / cross_depend / predict_noise ───────────────────────────

    #[test]
    fn encode_shapes_and_zero_gate_identity() {
        let cfg = toy_cfg();
        let params = DenoiserParams::init(&cfg, 8).unwrap();
        let mut r = rng(9);
        let tau = random_streams(&cfg, &mut r);
        let c = ConditionInput::unconditional(5);

        let mut cx = params.ctx();
        let (_, hs, ha, hr) = params.encode(&mut cx, &tau, &c).unwrap();
        assert_eq!(cx.g.value(hs).shape(), [cfg.horizon, cfg.width_s()]);
        assert_eq!(cx.g.value(ha).shape(), [cfg.horizon, cfg.width_a()]);
        assert_eq!(cx.g.value(hr.unwrap()).shape(), [cfg.horizon, cfg.width_r()]);
        assert_eq!(cfg.width_s(), cfg.dim_s * cfg.embed_multiplier);

        // with zero-initialized gates the stacks are identities:
        // h must equal encoder output + positional embedding exactly
        let got = cx.g.value(hs).clone();
        let mut cx2 = params.ctx();
        let xs = cx2.g.leaf_owned(tau.states.clone());
        let enc = params.net_enc_s().apply(&mut cx2, xs).unwrap();
        let pos = cx2.param(params.net_pos_s());
        let want = cx2.g.add(enc, pos).unwrap();
        assert_eq!(&got, cx2.g.value(want));
    }

    #[test]
    fn reward_stream_never_feeds_back() {
        let cfg = toy_cfg();
        let mut params = DenoiserParams::init(&cfg, 10).unwrap();
        let mut r = rng(11);
        params.perturb_all(0.2, &mut r);
        let mut tau = random_streams(&cfg, &mut r);
        let c = ConditionInput::with_return(17, 0.4);
        let base = params.predict_noise(&tau, &c).unwrap();
        // perturb the reward channel only
        tau.rewards = Some(Tensor::randn(&[cfg.horizon, 1], &mut r));
        let changed = params.predict_noise(&tau, &c).unwrap();
        assert_eq!(base.y_s, changed.y_s);
        assert_eq!(base.y_a, changed.y_a);
        assert!(base.y_r.unwrap().max_abs_diff(&changed.y_r.unwrap()) > 0.0);
    }

    #[test]
    fn predict_noise_shapes_and_determinism() {
        let cfg = toy_cfg();
        let mut params = DenoiserParams::init(&cfg, 12).unwrap();
        let mut r = rng(13);
        params.perturb_all(0.2, &mut r);
        let tau = random_streams(&cfg, &mut r);
        let c = ConditionInput::with_return(100, 0.9);
        let a = params.predict_noise(&tau, &c).unwrap();
        let b = params.predict_noise(&tau, &c).unwrap();
        assert_eq!(a.y_s.shape(), [cfg.horizon, cfg.dim_s]);
        assert_eq!(a.y_a.shape(), [cfg.horizon, cfg.dim_a]);
        assert_eq!(a.y_r.as_ref().unwrap().shape(), [cfg.horizon, 1]);
        assert_eq!(a, b);
        assert!(!a.y_s.has_nan() && !a.y_a.has_nan());
    }

    /// Shape contract over the full (H, dim_s, dim_a) grid from the spec.
    #[test]
    fn shape_contract_grid() {
        for h in [5usize, 10, 20] {
            for dim_s in 2..=17usize {
                for dim_a in 1..=6usize {
                    let cfg = DenoiserConfig {
                        horizon: h,
                        dim_s,
                        dim_a,
                        embed_multiplier: 1,
                        n_s: 1,
                        n_a: 1,
                        n_r: 1,
                        cond_dim: 8,
                        mlp_ratio: 1,
                        ..DenoiserConfig::default()
                    };
                    let params = DenoiserParams::init(&cfg, 1).unwrap();
                    let mut r = rng((h * 1000 + dim_s * 10 + dim_a) as u64);
                    let tau = random_streams(&cfg, &mut r);
                    let y = params
                        .predict_noise(&tau, &ConditionInput::unconditional(3))
                        .unwrap();
                    assert_eq!(y.y_s.shape(), [h, dim_s]);
                    assert_eq!(y.y_a.shape(), [h, dim_a]);
                    assert_eq!(y.y_r.unwrap().shape(), [h, 1]);
                }
            }
        }
    }

    #[test]
    fn reward_free_mode_drops_reward_paths() {
        let cfg = DenoiserConfig {
            reward_enabled: false,
            ..toy_cfg()
        };
        let params = DenoiserParams::init(&cfg, 14).unwrap();
        let mut r = rng(15);
        let tau = random_streams(&cfg, &mut r);
        assert!(tau.rewards.is_none());
        let y = params
            .predict_noise(&tau, &ConditionInput::unconditional(2))
            .unwrap();
        assert!(y.y_r.is_none());

        // supplying a reward stream to a reward-free model is a config error
        let mut bad = tau.clone();
        bad.rewards = Some(Tensor::zeros(&[cfg.horizon, 1]));
        assert!(params
            .predict_noise(&bad, &ConditionInput::unconditional(2))
            .is_err());
    }

    /// Reward-free model with weights copied from the shared (non-reward)
    /// part of a full model reproduces its y_s/y_a outputs exactly.
    #[test]
    fn reward_free_matches_full_model_on_shared_weights() {
        let full_cfg = toy_cfg();
        let rf_cfg = DenoiserConfig {
            reward_enabled: false,
            ..full_cfg.clone()
        };
        let mut full = DenoiserParams::init(&full_cfg, 16).unwrap();
        let mut r = rng(17);
        full.perturb_all(0.2, &mut r);
        let mut rf = DenoiserParams::init(&rf_cfg, 999).unwrap();
        for (dst, src) in rf.shared_indices().into_iter().zip(full.shared_indices()) {
            let t = full.tensors()[src].clone();
            rf.tensors_mut()[dst] = t;
        }
        let tau_full = random_streams(&full_cfg, &mut r);
        let tau_rf = TrajStreams {
            states: tau_full.states.clone(),
            actions: tau_full.actions.clone(),
            rewards: None,
        };
        let c = ConditionInput::with_return(42, 0.5);
        let yf = full.predict_noise(&tau_full, &c).unwrap();
        let yr = rf.predict_noise(&tau_rf, &c).unwrap();
        assert_eq!(yf.y_s, yr.y_s);
        assert_eq!(yf.y_a, yr.y_a);
    }

    /// Full-model gradient check on the toy config: mean-squared loss over
    /// all outputs, every parameter coordinate vs central differences.
    #[test]
    fn toy_gradient_check_against_central_differences() {
        let cfg = toy_cfg();
        let mut params = DenoiserParams::init(&cfg, 18).unwrap();
        let mut r = rng(19);
        params.perturb_all(0.25, &mut r);
        let tau = random_streams(&cfg, &mut r);
        let target_s = Tensor::randn(&[cfg.horizon, cfg.dim_s], &mut r);
        let target_a = Tensor::randn(&[cfg.horizon, cfg.dim_a], &mut r);
        let target_r = Tensor::randn(&[cfg.horizon, 1], &mut r);
        let c = ConditionInput::with_return(37, 0.3);

        let loss_of = |p: &DenoiserParams| -> f64 {
            let mut cx = p.ctx();
            let (ys, ya, yr) = p.forward(&mut cx, &tau, &c).unwrap();
            let ts = cx.g.leaf(&target_s);
            let ta = cx.g.leaf(&target_a);
            let tr = cx.g.leaf(&target_r);
            let ls = cx.g.mse(ys, ts).unwrap();
            let la = cx.g.mse(ya, ta).unwrap();
            let lr = cx.g.mse(yr.unwrap(), tr).unwrap();
            let l = cx.g.add(ls, la).unwrap();
            let l = cx.g.add(l, lr).unwrap();
            cx.g.value(l).data()[0]
        };

        // analytic gradients
        let grads = {
            let mut cx = params.ctx();
            let (ys, ya, yr) = params.forward(&mut cx, &tau, &c).unwrap();
            let ts = cx.g.leaf(&target_s);
            let ta = cx.g.leaf(&target_a);
            let tr = cx.g.leaf(&target_r);
            let ls = cx.g.mse(ys, ts).unwrap();
            let la = cx.g.mse(ya, ta).unwrap();
            let lr = cx.g.mse(yr.unwrap(), tr).unwrap();
            let l = cx.g.add(ls, la).unwrap();
            let l = cx.g.add(l, lr).unwrap();
            cx.g.backward(l).unwrap();
            cx.grads()
        };

        // FD over a deterministic subsample of coordinates per tensor (full
        // sweep runs in the acceptance suite)
        let mut checked = 0usize;
        for ti in 0..params.tensors().len() {
            let n = params.tensors()[ti].numel();
            let step = (n / 6).max(1);
            for idx in (0..n).step_by(step) {
                let orig = params.tensors()[ti].data()[idx];
                let mut f = |x: f64| {
                    let mut p = params.clone();
                    p.tensors_mut()[ti].data_mut()[idx] = x;
                    loss_of(&p)
                };
                let fd = central_diff(&mut f, orig, FD_STEP);
                let an = grads[ti].data()[idx];
                assert!(
                    grad_close(an, fd),
                    "tensor {ti} coord {idx}: analytic {an} vs fd {fd}"
                );
                checked += 1;
            }
        }
        assert!(checked > 100);
    }
}
