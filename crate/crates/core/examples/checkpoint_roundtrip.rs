//! Trains briefly, writes a checkpoint, reads it back and confirms the
//! restored run evaluates identically. Also shows corruption being caught.
//!
//! `cargo run --release --example checkpoint_roundtrip -- [dir]`

use std::path::PathBuf;

use mosa::adapters::AdapterConfig;
use mosa::data::{gen_synthetic, Checkpoint, RunConfig, RunState, SyntheticSpec};
use mosa::merge::{evaluate, InferenceMode};
use mosa::training::train;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(std::env::temp_dir);
    let path = dir.join("example.mosa-ckpt");

    let mut cfg = RunConfig::default();
    cfg.backbone.embed_dim = 32;
    cfg.adapter = AdapterConfig::mosa(8, 4);
    cfg.plan.epochs = 2;
    cfg.plan.warmup_epochs = 0;
    let (train_set, val_set) =
        gen_synthetic(&SyntheticSpec { train_per_class: 20, val_per_class: 10, ..Default::default() })?;

    let mut state = RunState::initialize(&cfg)?;
    let outcome = train(&mut state.model, &mut state.adapters, &train_set, None, &cfg.plan)?;
    state.optimizer = Some(outcome.optimizer);
    state.save(&path)?;
    let bytes = std::fs::read(&path)?;
    println!("wrote {} ({} bytes)", path.display(), bytes.len());

    let restored = RunState::load(&path)?;
    println!("state identical after reload: {}", restored == state);
    for mode in [InferenceMode::Merge, InferenceMode::Fixed(1)] {
        let a = evaluate(&state.model, &state.adapters, &val_set, mode, 128)?;
        let b = evaluate(&restored.model, &restored.adapters, &val_set, mode, 128)?;
        println!("{:<6} top1 original {:.4} restored {:.4}", mode.name(), a.top1, b.top1);
    }

    let mut damaged = bytes.clone();
    let mid = damaged.len() / 2;
    damaged[mid] ^= 0x01;
    match Checkpoint::from_bytes(&damaged) {
        Err(e) => println!("flipped byte {mid}: {e} (exit code {})", e.exit_code()),
        Ok(_) => println!("flipped byte {mid}: unexpectedly accepted"),
    }
    match Checkpoint::from_bytes(&bytes[..bytes.len() - 7]) {
        Err(e) => println!("truncated file: {e} (exit code {})", e.exit_code()),
        Ok(_) => println!("truncated file: unexpectedly accepted"),
    }
    std::fs::remove_file(&path)?;
    Ok(())
}
