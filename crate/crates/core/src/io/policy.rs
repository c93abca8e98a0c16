//! Behavior-cloning policy container: magic "XTEDPLCY", version, JSON
//! metadata, weight tensors.

use super::binio::{
    atomic_write, expect_magic, expect_version, read_json_block, read_tensor, read_u32,
    write_json_block, write_tensor, write_u32,
};
use crate::downstream::PolicyParams;
use crate::error::{Error, Result};
use crate::training::Normalizer;
use serde::{Deserialize, Serialize};
use std::io::Cursor;
use std::path::Path;

pub const POLICY_MAGIC: &[u8; 8] = b"XTEDPLCY";
pub const POLICY_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct PolicyMeta {
    dim_s: usize,
    dim_a: usize,
    hidden: usize,
    normalizer: Normalizer,
    action_limit: f64,
}

pub fn save_policy(path: &Path, policy: &PolicyParams) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(POLICY_MAGIC);
    write_u32(&mut buf, POLICY_VERSION)?;
    write_json_block(
        &mut buf,
        &PolicyMeta {
            dim_s: policy.dim_s,
            dim_a: policy.dim_a,
            hidden: policy.hidden,
            normalizer: policy.normalizer.clone(),
            action_limit: policy.action_limit,
        },
    )?;
    write_u32(&mut buf, policy.tensors.len() as u32)?;
    for t in &policy.tensors {
        write_tensor(&mut buf, t)?;
    }
    atomic_write(path, &buf)
}

pub fn load_policy(path: &Path) -> Result<PolicyParams> {
    let bytes = std::fs::read(path)?;
    let mut r = Cursor::new(bytes.as_slice());
    expect_magic(&mut r, POLICY_MAGIC, "policy")?;
    expect_version(&mut r, POLICY_VERSION, "policy")?;
    let meta: PolicyMeta = read_json_block(&mut r, "policy metadata")?;
    let count = read_u32(&mut r)? as usize;
    if count != 6 {
        return Err(Error::Format(format!("policy expects 6 tensors, found {count}")));
    }
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        tensors.push(read_tensor(&mut r)?);
    }
    Ok(PolicyParams {
        dim_s: meta.dim_s,
        dim_a: meta.dim_a,
        hidden: meta.hidden,
        tensors,
        normalizer: meta.normalizer,
        action_limit: meta.action_limit,
        step_losses: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::downstream::{bc_train, BcConfig};
    use crate::model::TrajStreams;
    use crate::numerics::Tensor;
    use crate::training::Window;
    use rand::SeedableRng;

    #[test]
    fn policy_round_trips_and_acts_identically() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let ws: Vec<Window> = (0..10)
            .map(|_| {
                Window::new(
                    TrajStreams {
                        states: Tensor::randn(&[5, 4], &mut rng),
                        actions: Tensor::randn(&[5, 2], &mut rng),
                        rewards: None,
                    },
                    None,
                )
            })
            .collect();
        let policy = bc_train(
            &ws,
            30.0,
            &BcConfig {
                grad_steps: 30,
                ..BcConfig::default()
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.bin");
        save_policy(&path, &policy).unwrap();
        let back = load_policy(&path).unwrap();
        assert_eq!(back.tensors, policy.tensors);
        let s = [0.4, -0.3, 0.9, 0.1];
        assert_eq!(back.action_for(&s), policy.action_for(&s));
    }
}
