//! Mixture of sparse adapters for parameter-efficient fine-tuning.
//!
//! A standard bottleneck adapter is split into `N` disjoint sparse experts
//! that share one dense storage. Training activates experts stochastically
//! per batch, masks each update to the active experts' entries and
//! regularises two stochastic passes towards agreement. After training the
//! experts are merged back into one dense adapter, so inference costs exactly
//! what a standard adapter costs.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: float64 tensors, reverse-mode tape, finite-difference oracle;
//! * [`backbone`]: a small frozen ViT-style encoder with adapter insertion points;
//! * [`adapters`]: mask splitting, sparse expert adapters, LoRA variants;
//! * [`training`]: expert sampling, the consistency objective, masked AdamW,
//!   warmup + cosine schedule and the training loop;
//! * [`merge`]: expert merging, inference modes, evaluation, parameter counts;
//! * [`data`]: synthetic datasets, on-disk dataset/checkpoint formats, run configs;
//! * [`cli`]: the `mosa` command line front end.

pub mod adapters;
pub mod backbone;
pub mod cli;
pub mod data;
pub mod error;
pub mod merge;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{MosaError, Result};
