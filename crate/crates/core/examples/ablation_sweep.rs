//! Grid over expert count and feature-alignment placement, built from a run
//! config with key=value overrides (the same mechanism `mosa ablate` uses).
//!
//! `cargo run --release --example ablation_sweep -- [epochs]`

use mosa::cli::sweep_cells;
use mosa::data::{gen_synthetic, RunConfig, RunState, SyntheticSpec};
use mosa::merge::{evaluate, InferenceMode};
use mosa::training::train;

fn main() -> mosa::Result<()> {
    let epochs = std::env::args().nth(1).unwrap_or_else(|| "4".into());
    let base = RunConfig::parse(&format!("embed_dim = 32\nbottleneck_dim = 8\nepochs = {epochs}\nwarmup_epochs = 0\n"))?;
    let (train_set, val_set) =
        gen_synthetic(&SyntheticSpec { train_per_class: 40, val_per_class: 20, ..Default::default() })?;

    let sweeps = vec![
        ("num_experts".to_string(), vec!["1".to_string(), "2".into(), "4".into()]),
        ("alignment".to_string(), vec!["none".to_string(), "shallow".into(), "deep".into()]),
    ];
    println!("num_experts,alignment,top1");
    for cell in sweep_cells(&sweeps) {
        let cfg = base.with_overrides(&cell)?;
        let mut state = RunState::initialize(&cfg)?;
        train(&mut state.model, &mut state.adapters, &train_set, None, &cfg.plan)?;
        let r = evaluate(&state.model, &state.adapters, &val_set, InferenceMode::Merge, 128)?;
        println!("{},{},{:.4}", cell[0].1, cell[1].1, r.top1);
    }
    Ok(())
}
