//! Checkpoint container: magic "XTEDCKPT", format version, JSON metadata
//! (model config, schedule recipe, normalizer), then parameter tensors in
//! construction order as 64-bit little-endian floats. Round-trips bit-exact.

use super::binio::{
    atomic_write, expect_magic, expect_version, read_json_block, read_tensor, read_u32,
    write_json_block, write_tensor, write_u32,
};
use crate::error::{Error, Result};
use crate::model::{DenoiserConfig, DenoiserParams};
use crate::schedule::ScheduleSpec;
use crate::training::Normalizer;
use serde::{Deserialize, Serialize};
use std::io::Cursor;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"XTEDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: DenoiserConfig,
    pub schedule: ScheduleSpec,
    pub normalizer: Normalizer,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: DenoiserParams,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        write_u32(&mut buf, CHECKPOINT_VERSION)?;
        write_json_block(&mut buf, &self.meta)?;
        write_u32(&mut buf, self.params.tensors().len() as u32)?;
        for t in self.params.tensors() {
            write_tensor(&mut buf, t)?;
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        expect_magic(&mut r, CHECKPOINT_MAGIC, "checkpoint")?;
        expect_version(&mut r, CHECKPOINT_VERSION, "checkpoint")?;
        let meta: CheckpointMeta = read_json_block(&mut r, "checkpoint metadata")?;
        meta.model.validate()?;
        let count = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            tensors.push(read_tensor(&mut r)?);
        }
        // rebuild the parameter layout from the config, then install weights
        let mut params = DenoiserParams::init(&meta.model, 0)
            .map_err(|e| Error::Format(format!("checkpoint config invalid: {e}")))?;
        params.set_tensors(tensors)?;
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample_checkpoint() -> Checkpoint {
        let model = DenoiserConfig {
            horizon: 5,
            dim_s: 3,
            dim_a: 2,
            embed_multiplier: 2,
            n_s: 1,
            n_a: 1,
            n_r: 1,
            cond_dim: 8,
            mlp_ratio: 1,
            ..DenoiserConfig::default()
        };
        let mut params = DenoiserParams::init(&model, 3).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        params.perturb_all(0.1, &mut rng);
        Checkpoint {
            meta: CheckpointMeta {
                model,
                schedule: ScheduleSpec::default(),
                normalizer: Normalizer {
                    state_mean: vec![0.1, 0.2, 0.3],
                    state_std: vec![1.0, 2.0, 3.0],
                    action_mean: vec![-0.5, 0.5],
                    action_std: vec![0.9, 1.1],
                    reward_mean: Some(-3.0),
                    reward_std: Some(0.7),
                    ret_range: Some((-60.0, -10.0)),
                },
            },
            params,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample_checkpoint();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.params.tensors().len(), ck.params.tensors().len());
        for (a, b) in back.params.tensors().iter().zip(ck.params.tensors()) {
            assert_eq!(a, b);
        }
        assert_eq!(back.meta.normalizer, ck.meta.normalizer);
        // re-serialization reproduces identical bytes
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let ck = sample_checkpoint();
        let mut bytes = ck.to_bytes().unwrap();
        bytes[8] = 9; // bump the version field
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains('9') && err.contains('1'), "{err}");
    }

    #[test]
    fn bad_magic_rejected() {
        let ck = sample_checkpoint();
        let mut bytes = ck.to_bytes().unwrap();
        bytes[0] = b'Z';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn save_load_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = sample_checkpoint();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
    }
}
