//! Mixture of sparse LoRA experts on the attention query/value projections,
//! compared with plain LoRA.
//!
//! `cargo run --release --example mosl_lora -- [epochs]`

use mosa::adapters::{AdapterConfig, AdapterSet, Method};
use mosa::backbone::{build_backbone, BackboneConfig};
use mosa::data::{gen_synthetic, SyntheticSpec};
use mosa::merge::{evaluate, InferenceMode};
use mosa::rng::Rng;
use mosa::training::{train, TrainPlan};

fn main() -> mosa::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(8);
    let bcfg = BackboneConfig { embed_dim: 32, ..Default::default() };
    let (train_set, val_set) =
        gen_synthetic(&SyntheticSpec { train_per_class: 60, val_per_class: 20, ..Default::default() })?;

    for (name, method, experts, reg) in [("lora", Method::Lora, 1, 0.0), ("mosl", Method::Mosl, 4, 1.0)] {
        let acfg = AdapterConfig { method, bottleneck_dim: 4, num_experts: experts, ..Default::default() };
        let mut model = build_backbone(&bcfg, &mut Rng::new(0))?;
        let mut adapters = AdapterSet::build(&acfg, bcfg.embed_dim, bcfg.num_layers, 0)?;
        let plan = TrainPlan { epochs, warmup_epochs: 1, alpha: reg, beta: reg, ..Default::default() };
        train(&mut model, &mut adapters, &train_set, None, &plan)?;
        for mode in [InferenceMode::Merge, InferenceMode::Ensemble] {
            let r = evaluate(&model, &adapters, &val_set, mode, 128)?;
            println!("{name:<5} {:<9} top1 {:.4}  params {}  adapter MACs {}", mode.name(), r.top1, r.params_excl_head, r.flops_adapter);
        }
    }
    Ok(())
}
