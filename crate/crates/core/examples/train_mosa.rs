//! Trains a mixture of sparse adapters on a synthetic task and compares the
//! merged model against a fixed single expert.
//!
//! `cargo run --release --example train_mosa -- [epochs] [experts]`

use std::time::Instant;

use mosa::adapters::{AdapterConfig, AdapterSet};
use mosa::backbone::{build_backbone, BackboneConfig};
use mosa::data::{gen_synthetic, SyntheticSpec};
use mosa::merge::{evaluate, InferenceMode};
use mosa::rng::Rng;
use mosa::training::{train, TrainPlan};

fn main() -> mosa::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(10);
    let experts: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(4);

    let (train_set, val_set) = gen_synthetic(&SyntheticSpec::default())?;
    let bcfg = BackboneConfig::default();
    let mut model = build_backbone(&bcfg, &mut Rng::new(0))?;
    let mut adapters = AdapterSet::build(&AdapterConfig::mosa(8, experts), bcfg.embed_dim, bcfg.num_layers, 0)?;
    let plan = TrainPlan { epochs, warmup_epochs: (epochs / 10).max(1).min(epochs - 1), ..Default::default() };

    let start = Instant::now();
    let outcome = train(&mut model, &mut adapters, &train_set, None, &plan)?;
    println!("trained {epochs} epochs in {:.1}s", start.elapsed().as_secs_f64());
    for m in &outcome.epochs {
        println!("epoch {:>3}  loss {:.4}  ce {:.4}  kl {:.5}  align {:.5}", m.epoch, m.terms.total, m.terms.ce, m.terms.kl(), m.terms.align_mse);
    }
    for mode in [InferenceMode::Fixed(0), InferenceMode::Stochastic { seed: 1 }, InferenceMode::Ensemble, InferenceMode::Merge] {
        let r = evaluate(&model, &adapters, &val_set, mode, 128)?;
        println!("{:<10} top1 {:.4}  adapter MACs {}", mode.name(), r.top1, r.flops_adapter);
    }
    Ok(())
}
