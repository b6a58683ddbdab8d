//! Synthetic data, the on-disk dataset and checkpoint formats, run configs.

pub mod augment;
mod bytes;
mod checkpoint;
mod config;
mod dataset;
mod synthetic;

pub use checkpoint::{set_trainable_flags, Checkpoint, MaskRecord, RunState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{is_known_key, parse_override, parse_pairs, RunConfig};
pub use dataset::{Dataset, DATASET_HEADER_LEN, DATASET_MAGIC, DATASET_VERSION};
pub use synthetic::{gen_synthetic, SyntheticSpec};
