//! Linear probe vs. standard adapter vs. mixtures of sparse adapters on the
//! synthetic benchmark, averaged over seeds.
//!
//! `cargo run --release --example desk_comparison -- [seeds] [embed_dim] [epochs]`

use std::time::Instant;

use mosa::adapters::{AdapterConfig, AdapterSet, Method};
use mosa::backbone::{build_backbone, BackboneConfig};
use mosa::data::{gen_synthetic, set_trainable_flags, SyntheticSpec};
use mosa::merge::{evaluate, InferenceMode};
use mosa::rng::Rng;
use mosa::training::{train, TrainPlan};

fn main() -> mosa::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(2);
    let dim: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(32);
    let epochs: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(30);
    let base_lr: f64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(0.01);

    let bcfg = BackboneConfig { embed_dim: dim, ..Default::default() };
    let methods: Vec<(&str, AdapterConfig, f64, f64)> = vec![
        ("linear_probe", AdapterConfig { method: Method::LinearProbe, ..AdapterConfig::standard(8) }, 0.0, 0.0),
        ("adapter", AdapterConfig::standard(8), 0.0, 0.0),
        ("mosa_n2", AdapterConfig::mosa(8, 2), 1.0, 1.0),
        ("mosa_n3", AdapterConfig::mosa(8, 3), 1.0, 1.0),
        ("mosa_n4", AdapterConfig::mosa(8, 4), 1.0, 1.0),
    ];
    let mut merge_sum = vec![0.0; methods.len()];
    let mut fixed_sum = vec![0.0; methods.len()];
    let start = Instant::now();
    for seed in 0..seeds {
        let (train_set, val_set) = gen_synthetic(&SyntheticSpec { seed, ..Default::default() })?;
        for (i, (name, acfg, alpha, beta)) in methods.iter().enumerate() {
            let mut model = build_backbone(&bcfg, &mut Rng::new(seed))?;
            set_trainable_flags(&mut model, acfg.method);
            let mut adapters = AdapterSet::build(acfg, dim, bcfg.num_layers, seed)?;
            let plan = TrainPlan { epochs, warmup_epochs: epochs / 10, alpha: *alpha, beta: *beta, seed, base_lr, ..Default::default() };
            train(&mut model, &mut adapters, &train_set, None, &plan)?;
            let merge = evaluate(&model, &adapters, &val_set, InferenceMode::Merge, 250)?.top1;
            let fixed = evaluate(&model, &adapters, &val_set, InferenceMode::Fixed(0), 250)?.top1;
            merge_sum[i] += merge;
            fixed_sum[i] += fixed;
            println!("seed {seed} {name:<13} merge {merge:.4} fixed {fixed:.4}  [{:.0}s]", start.elapsed().as_secs_f64());
        }
    }
    println!("\nmethod         merge   fixed   (means over {seeds} seeds)");
    for (i, (name, ..)) in methods.iter().enumerate() {
        println!("{name:<13} {:.4}  {:.4}", merge_sum[i] / seeds as f64, fixed_sum[i] / seeds as f64);
    }
    Ok(())
}
