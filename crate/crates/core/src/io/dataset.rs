//! Dataset container: magic "XTEDDATA", format version, dims, then per
//! trajectory a length header and row-major 64-bit little-endian floats for
//! states/actions/rewards. A length-prefixed JSON footer carries provenance
//! records; everything before the footer is the payload, the scope byte-level
//! determinism is defined over.

use super::binio::{
    atomic_write, expect_magic, expect_version, read_f64s, read_json_block, read_u32,
    write_f64s, write_json_block, write_u32,
};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::training::Trajectory;
use serde::{Deserialize, Serialize};
use std::io::Cursor;
use std::path::Path;

pub const DATASET_MAGIC: &[u8; 8] = b"XTEDDATA";
pub const DATASET_VERSION: u32 = 1;

/// One provenance entry appended by a pipeline command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub command: String,
    pub timestamp_ms: u64,
    #[serde(default)]
    pub details: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub dim_s: usize,
    pub dim_a: usize,
    pub has_rewards: bool,
    pub trajectories: Vec<Trajectory>,
    pub provenance: Vec<ProvenanceRecord>,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>, provenance: Vec<ProvenanceRecord>) -> Result<Self> {
        let first = trajectories
            .first()
            .ok_or_else(|| Error::config("dataset needs at least one trajectory"))?;
        let (dim_s, dim_a) = (first.dim_s(), first.dim_a());
        let has_rewards = first.rewards.is_some();
        for t in &trajectories {
            t.validate()?;
            if t.dim_s() != dim_s || t.dim_a() != dim_a || t.rewards.is_some() != has_rewards {
                return Err(Error::dimension(
                    "trajectories disagree on dims or reward presence",
                ));
            }
        }
        Ok(Self {
            dim_s,
            dim_a,
            has_rewards,
            trajectories,
            provenance,
        })
    }

    pub fn transition_count(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }

    /// Domain tag recorded in provenance, if any.
    pub fn domain(&self) -> Option<String> {
        self.provenance
            .iter()
            .filter_map(|p| p.details.get("domain"))
            .filter_map(|d| d.as_str())
            .next()
            .map(str::to_string)
    }

    fn payload_to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(DATASET_MAGIC);
        write_u32(&mut buf, DATASET_VERSION)?;
        write_u32(&mut buf, self.dim_s as u32)?;
        write_u32(&mut buf, self.dim_a as u32)?;
        write_u32(&mut buf, u32::from(self.has_rewards))?;
        write_u32(&mut buf, self.trajectories.len() as u32)?;
        for t in &self.trajectories {
            write_u32(&mut buf, t.len() as u32)?;
            write_f64s(&mut buf, t.states.data())?;
            write_f64s(&mut buf, t.actions.data())?;
            if let Some(r) = &t.rewards {
                write_f64s(&mut buf, r.data())?;
            }
        }
        Ok(buf)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = self.payload_to_bytes()?;
        write_json_block(&mut buf, &self.provenance)?;
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        expect_magic(&mut r, DATASET_MAGIC, "dataset")?;
        expect_version(&mut r, DATASET_VERSION, "dataset")?;
        let dim_s = read_u32(&mut r)? as usize;
        let dim_a = read_u32(&mut r)? as usize;
        let has_rewards = read_u32(&mut r)? != 0;
        let count = read_u32(&mut r)? as usize;
        if dim_s == 0 || dim_a == 0 {
            return Err(Error::Format("dataset with zero dims".into()));
        }
        let mut trajectories = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            if len == 0 || len > 10_000_000 {
                return Err(Error::Format(format!("trajectory length {len} out of range")));
            }
            let states = Tensor::from_raw(vec![len, dim_s], read_f64s(&mut r, len * dim_s)?);
            let actions = Tensor::from_raw(vec![len, dim_a], read_f64s(&mut r, len * dim_a)?);
            let rewards = if has_rewards {
                Some(Tensor::from_raw(vec![len, 1], read_f64s(&mut r, len)?))
            } else {
                None
            };
            trajectories.push(Trajectory {
                states,
                actions,
                rewards,
                domain: String::new(),
            });
        }
        let provenance: Vec<ProvenanceRecord> = read_json_block(&mut r, "dataset provenance")?;
        let mut ds = Self {
            dim_s,
            dim_a,
            has_rewards,
            trajectories,
            provenance,
        };
        let domain = ds.domain().unwrap_or_else(|| "unknown".into());
        for t in &mut ds.trajectories {
            t.domain = domain.clone();
        }
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// The payload region of a serialized dataset file (everything before the
    /// provenance footer).
    pub fn payload_bytes(path: &Path) -> Result<Vec<u8>> {
        let ds = Self::load(path)?;
        ds.payload_to_bytes()
    }
}
