//! Adapter modules and the sparse-expert machinery around them.

mod config;
mod masks;
mod modules;

pub use config::{Activation, AdapterConfig, AdapterKind, ExpertPolicy, Insertion, Method};
pub use masks::{split_masks, MaskSet, RetainMask};
pub use modules::{
    AdapterSet, ExpertPick, GradMask, LayerAdapters, LoraModule, LoraTarget, ModuleRef, Routing,
    SparseExpertAdapter, SplitWeight,
};

use crate::error::Result;
use crate::rng::Rng;

/// Prunes a dense adapter set once, keeping `retain_fraction` of each
/// projection's entries (the SparseAdapter / SparseLoRA baselines).
///
/// Existing expert masks are dropped; the returned set trains and counts only
/// the retained entries.
pub fn build_sparse_adapter_baseline(adapters: &AdapterSet, retain_fraction: f64, rng: &mut Rng) -> Result<AdapterSet> {
    let mut out = adapters.clone();
    out.cfg.retain_fraction = retain_fraction;
    out.cfg.method = match adapters.cfg.kind() {
        Some(AdapterKind::Lora) => Method::SparseLora,
        _ => Method::SparseAdapter,
    };
    for (i, w) in out.split_weights_mut().into_iter().enumerate() {
        let shape = w.param.tensor.shape().to_vec();
        let mut sub = rng.fork(i as u64);
        w.experts = None;
        w.retain = Some(RetainMask::random(shape[0], shape[1], retain_fraction, &mut sub)?);
    }
    Ok(out)
}
