//! Merges trained experts back into one dense adapter and checks that the
//! merged model reproduces the dense-weight forward exactly.
//!
//! `cargo run --release --example jigsaw_merge -- [experts] [epochs]`

use mosa::adapters::{AdapterConfig, AdapterSet, Routing};
use mosa::backbone::{build_backbone, BackboneConfig};
use mosa::data::{gen_synthetic, SyntheticSpec};
use mosa::merge::{infer, jigsaw, merge_experts, InferenceMode};
use mosa::rng::Rng;
use mosa::tensor::Tape;
use mosa::training::{train, TrainPlan};

fn main() -> mosa::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().ok());
    let experts = args.next().flatten().unwrap_or(4);
    let epochs = args.next().flatten().unwrap_or(3);

    let bcfg = BackboneConfig { embed_dim: 32, ..Default::default() };
    let (train_set, val_set) =
        gen_synthetic(&SyntheticSpec { train_per_class: 30, val_per_class: 10, ..Default::default() })?;
    let mut model = build_backbone(&bcfg, &mut Rng::new(0))?;
    let mut adapters = AdapterSet::build(&AdapterConfig::mosa(8, experts), bcfg.embed_dim, bcfg.num_layers, 0)?;
    train(&mut model, &mut adapters, &train_set, None, &TrainPlan { epochs, warmup_epochs: 0, ..Default::default() })?;

    // Reassemble one split weight by hand from its expert views.
    let w = adapters.split_weights().into_iter().find(|w| w.experts.is_some()).expect("a split weight");
    let masks = w.experts.as_ref().unwrap();
    let views = (0..masks.num_experts()).map(|i| w.expert_view(i)).collect::<mosa::Result<Vec<_>>>()?;
    let rebuilt = jigsaw(&views, masks)?;
    println!("{}: jigsaw of {} views equals storage: {}", w.param.name, views.len(), rebuilt.data() == w.param.tensor.data());

    let merged = merge_experts(&adapters)?;
    let (images, _) = val_set.batch(&(0..16).collect::<Vec<_>>())?;
    let a = infer(&model, &merged, &images, InferenceMode::Merge)?;
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &images, Some(&adapters), &Routing::Dense)?;
    let b = tape.tensor(out.logits);
    let exact = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    println!("merged logits bit-identical to dense weights: {exact}");
    println!("trainable params before {} after {}", adapters.trainable_count(), merged.trainable_count());
    Ok(())
}
