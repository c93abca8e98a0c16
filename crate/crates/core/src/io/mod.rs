//! Binary container formats and file helpers.

pub mod binio;
mod checkpoint;
mod dataset;
mod policy;

pub use binio::{atomic_write, sha256_bytes, sha256_file};
pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use dataset::{Dataset, ProvenanceRecord, DATASET_MAGIC, DATASET_VERSION};
pub use policy::{load_policy, save_policy, POLICY_MAGIC, POLICY_VERSION};
