//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! `cargo test --test acceptance` runs everything; pass criterion numbers
//! (e.g. `cargo test --test acceptance -- 1 4 9`) to run a subset.

mod common;

use std::time::Instant;

use common::grad::{check_full_forward, check_op, op_cases, TOL};
use common::train::{frozen_entry_audit, library_trajectory, reference_trajectory};
use common::{max_abs_diff, model_and_adapters, randomize_adapters, random_images, synthetic, tiny_backbone};
use mosa::adapters::{split_masks, AdapterConfig, AdapterSet, ExpertPick, Method, ModuleRef, Routing};
use mosa::backbone::{build_backbone, BackboneConfig};
use mosa::data::{gen_synthetic, set_trainable_flags, Checkpoint, Dataset, RunConfig, RunState, SyntheticSpec};
use mosa::merge::{count_params_for_config, evaluate, infer, merge_experts, InferenceMode, Predictor};
use mosa::rng::Rng;
use mosa::tensor::{Tape, Tensor};
use mosa::training::{consistency_objective, train, PassOutputs, TrainPlan};
use mosa::MosaError;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: MosaError) -> String {
    e.to_string()
}

fn partitions() -> Outcome {
    let mut checked = 0;
    for (rows, cols) in [(8, 4), (64, 64), (768, 64)] {
        for n in [1, 2, 3, 4, 5, 8] {
            let masks = split_masks(rows, cols, n, &mut Rng::new((rows * 31 + cols * 7 + n) as u64)).map_err(err)?;
            let bitmaps: Vec<Vec<bool>> = (0..n).map(|i| masks.bitmap(i)).collect();
            let mut cover = vec![0u32; rows * cols];
            for b in &bitmaps {
                ensure(b.len() == rows * cols, || format!("bitmap length {} for {rows}x{cols}", b.len()))?;
                for (e, &on) in b.iter().enumerate() {
                    cover[e] += u32::from(on);
                }
            }
            ensure(cover.iter().all(|&c| c == 1), || format!("{rows}x{cols} N={n}: not an exact cover"))?;
            let sizes: Vec<usize> = bitmaps.iter().map(|b| b.iter().filter(|&&x| x).count()).collect();
            let (lo, hi) = (*sizes.iter().min().unwrap(), *sizes.iter().max().unwrap());
            ensure(hi - lo <= 1, || format!("{rows}x{cols} N={n}: sizes {lo}..{hi}"))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} (shape, N) pairs disjoint, exhaustive, balanced"))
}

fn gradients() -> Outcome {
    let mut worst_op = (0.0f64, String::new());
    let mut cases = 0;
    for seed in 0..20 {
        for case in op_cases(seed) {
            let (e, failure) = check_op(&case);
            if let Some(f) = failure {
                return Err(format!("{} seed {seed}: {f}", case.name));
            }
            if e > worst_op.0 || worst_op.1.is_empty() {
                worst_op = (e, format!("{} seed {seed}", case.name));
            }
            cases += 1;
        }
    }
    ensure(worst_op.0 <= TOL, || format!("op {} rel err {:.2e}", worst_op.1, worst_op.0))?;
    let mut worst_fwd = (0.0f64, String::new());
    for seed in 0..20 {
        let (e, name) = check_full_forward(seed).map_err(err)?;
        if e > worst_fwd.0 || worst_fwd.1.is_empty() {
            worst_fwd = (e, format!("{name} seed {seed}"));
        }
    }
    ensure(worst_fwd.0 <= TOL, || format!("full forward {} rel err {:.2e}", worst_fwd.1, worst_fwd.0))?;
    Ok(format!(
        "{cases} op checks worst {:.1e}; 20 full-model checks worst {:.1e}",
        worst_op.0, worst_fwd.0
    ))
}

fn frozen_entries() -> Outcome {
    let bcfg = BackboneConfig { embed_dim: 32, ..Default::default() };
    let (data, _) = synthetic(10, 20, 16, 21);
    let plan = TrainPlan { epochs: 10, warmup_epochs: 1, batch_size: 10, seed: 21, ..Default::default() };
    let (mut model, mut adapters) = model_and_adapters(&bcfg, &AdapterConfig::mosa(8, 4), 21);
    let audit = frozen_entry_audit(&mut model, &mut adapters, &data, &plan).map_err(err)?;
    ensure(audit.steps == 200, || format!("{} steps", audit.steps))?;
    ensure(audit.replay_mismatches == 0, || format!("{} routings differ from the seed replay", audit.replay_mismatches))?;
    ensure(audit.violations.is_empty(), || {
        format!("{} inactive entries moved, first {}", audit.violations.len(), audit.violations[0])
    })?;
    ensure(audit.active_moves > 0, || "no entry ever moved".into())?;
    ensure(audit.backbone_unchanged, || "backbone bytes changed".into())?;
    Ok(format!("200 steps, {} active updates, 0 inactive updates, backbone intact", audit.active_moves))
}

/// Sum of per-expert module deltas minus the `(N-1)` extra copies of the
/// shared output bias, against the delta of the merged module.
fn additivity_gap(set: &AdapterSet, merged: &AdapterSet, seed: u64) -> Result<f64, String> {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for (m, (orig, joined)) in set.modules().into_iter().zip(merged.modules()).enumerate() {
        let n = set.num_experts();
        let x = Tensor::randn([2, 5, 8], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let (sum, target, bias) = match (orig, joined) {
            (ModuleRef::Adapter(a), ModuleRef::Adapter(b)) => {
                let mut acc = vec![0.0; x.numel()];
                for i in 0..n {
                    let d = a.delta(&mut tape, xv, Some(&ExpertPick { down: None, up: Some(i) })).map_err(err)?;
                    acc.iter_mut().zip(tape.value(d)).for_each(|(s, v)| *s += v);
                }
                let t = b.delta(&mut tape, xv, None).map_err(err)?;
                let bias = a.b_up.as_ref().map(|p| p.tensor.data().to_vec()).unwrap_or(vec![0.0; 8]);
                (acc, tape.value(t).to_vec(), bias)
            }
            (ModuleRef::Lora(a), ModuleRef::Lora(b)) => {
                let mut acc = vec![0.0; x.numel()];
                for i in 0..n {
                    let d = a.delta(&mut tape, xv, Some(i)).map_err(err)?;
                    acc.iter_mut().zip(tape.value(d)).for_each(|(s, v)| *s += v);
                }
                let t = b.delta(&mut tape, xv, None).map_err(err)?;
                (acc, tape.value(t).to_vec(), vec![0.0; 8])
            }
            _ => return Err(format!("module {m} changed kind when merged")),
        };
        let corrected: Vec<f64> =
            sum.iter().enumerate().map(|(e, s)| s - (n - 1) as f64 * bias[e % bias.len()]).collect();
        worst = worst.max(max_abs_diff(&corrected, &target));
    }
    Ok(worst)
}

fn merge_identity() -> Outcome {
    let bcfg = tiny_backbone();
    let images = random_images(3, &bcfg, 4);
    let mut note = vec![];
    for (label, acfg) in [
        ("hierarchical", AdapterConfig::mosa(4, 4)),
        ("split-down", AdapterConfig { hierarchical: false, sparsify_down: true, ..AdapterConfig::mosa(4, 3) }),
        ("mosl", AdapterConfig { method: Method::Mosl, bottleneck_dim: 2, num_experts: 3, ..Default::default() }),
    ] {
        let (model, mut set) = model_and_adapters(&bcfg, &acfg, 4);
        randomize_adapters(&mut set, 4);
        let merged = merge_experts(&set).map_err(err)?;

        let via_merge = infer(&model, &set, &images, InferenceMode::Merge).map_err(err)?;
        let mut tape = Tape::new();
        let dense = model.forward(&mut tape, &images, Some(&set), &Routing::Dense).map_err(err)?;
        let dense = tape.tensor(dense.logits);
        let same = via_merge.data().iter().zip(dense.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || format!("{label}: merged logits differ from the dense-weight forward"))?;

        if label != "split-down" {
            let gap = additivity_gap(&set, &merged, 9)?;
            ensure(gap <= 1e-12, || format!("{label}: expert sum vs merged delta gap {gap:.2e}"))?;
            note.push(format!("{label} gap {gap:.1e}"));
        }
    }

    // A plain adapter holding the same dense values forwards identically.
    let (model, mut set) = model_and_adapters(&bcfg, &AdapterConfig::mosa(4, 4), 6);
    randomize_adapters(&mut set, 6);
    let (_, mut plain) = model_and_adapters(&bcfg, &AdapterConfig::standard(4), 6);
    ensure(plain.params().len() == set.params().len(), || "parameter lists differ".into())?;
    for (dst, src) in plain.params_mut().into_iter().zip(set.params()) {
        dst.tensor.data_mut().copy_from_slice(src.tensor.data());
    }
    let a = infer(&model, &set, &images, InferenceMode::Merge).map_err(err)?;
    let b = infer(&model, &plain, &images, InferenceMode::Merge).map_err(err)?;
    ensure(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()), || {
        "merged mixture differs from a standard adapter with the same weights".into()
    })?;
    Ok(format!("bit-exact dense forward; {}", note.join(", ")))
}

fn degeneracy() -> Outcome {
    let bcfg = BackboneConfig { embed_dim: 32, ..Default::default() };
    let (data, _) = synthetic(10, 10, 16, 17);
    let plan = TrainPlan { epochs: 3, warmup_epochs: 1, batch_size: 16, alpha: 0.0, beta: 0.0, weight_decay: 0.01, seed: 17, ..Default::default() };
    let (mut m1, mut a1) = model_and_adapters(&bcfg, &AdapterConfig::mosa(8, 1), 17);
    let ours = library_trajectory(&mut m1, &mut a1, &data, &plan).map_err(err)?;
    let (mut m2, mut a2) = model_and_adapters(&bcfg, &AdapterConfig::standard(8), 17);
    let reference = reference_trajectory(&mut m2, &mut a2, &data, &plan).map_err(err)?;
    ensure(ours.len() == reference.len() && !ours.is_empty(), || format!("{} vs {} steps", ours.len(), reference.len()))?;
    for (step, (a, b)) in ours.iter().zip(&reference).enumerate() {
        for (x, y) in a.iter().zip(b) {
            let same = x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits());
            ensure(same, || format!("trajectories diverge at step {step}"))?;
        }
    }
    Ok(format!("{} steps bit-identical", ours.len()))
}

fn parameter_counts() -> Outcome {
    let big = BackboneConfig { embed_dim: 768, num_layers: 12, num_heads: 12, image_size: 224, patch_size: 16, ..Default::default() };
    let count = |a: AdapterConfig| count_params_for_config(&big, &a).map_err(err);
    let r64 = count(AdapterConfig::mosa(64, 4))?;
    ensure(r64 == 1_189_632, || format!("r=64 count {r64}"))?;
    let r16 = count(AdapterConfig::mosa(16, 4))?;
    ensure(r16 == 304_320, || format!("r=16 count {r16}"))?;
    let standard = count(AdapterConfig::standard(64))?;
    ensure(standard == r64, || format!("standard adapter {standard} vs mixture {r64}"))?;
    for n in 1..=8 {
        let c = count(AdapterConfig::mosa(64, n))?;
        ensure(c == r64, || format!("N={n} gives {c}"))?;
    }
    Ok(format!("r=64 {r64}, r=16 {r16}, N=1..8 and standard identical"))
}

fn inference_cost() -> Outcome {
    let bcfg = tiny_backbone();
    let images = random_images(4, &bcfg, 2);
    let mut notes = vec![];
    for acfg in [
        AdapterConfig::mosa(4, 2),
        AdapterConfig::mosa(4, 4),
        AdapterConfig { insertion: mosa::adapters::Insertion::Houlsby, ..AdapterConfig::mosa(4, 8) },
        AdapterConfig { method: Method::Mosl, bottleneck_dim: 2, num_experts: 3, ..Default::default() },
    ] {
        let (model, set) = model_and_adapters(&bcfg, &acfg, 2);
        let macs = |mode| -> Result<u64, String> {
            let mut p = Predictor::new(&model, &set, mode).map_err(err)?;
            p.logits(&images).map_err(err)?;
            Ok(p.adapter_macs())
        };
        let merge = macs(InferenceMode::Merge)?;
        let ensemble = macs(InferenceMode::Ensemble)?;
        let n = acfg.num_experts as u64;
        ensure(merge > 0 && ensemble == n * merge, || format!("N={n}: ensemble {ensemble} vs merge {merge}"))?;
        notes.push(format!("N={n} {ensemble}={n}x{merge}"));
    }
    Ok(notes.join(", "))
}

struct DeskRow {
    name: &'static str,
    merge: Vec<f64>,
    fixed: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn desk_ordering() -> Outcome {
    const SEEDS: u64 = 5;
    const EPOCHS: usize = 30;
    let bcfg = BackboneConfig { embed_dim: 32, ..Default::default() };
    let methods: Vec<(&'static str, AdapterConfig, f64)> = vec![
        ("linear_probe", AdapterConfig { method: Method::LinearProbe, ..AdapterConfig::standard(8) }, 0.0),
        ("adapter", AdapterConfig::standard(8), 0.0),
        ("mosa_n2", AdapterConfig::mosa(8, 2), 1.0),
        ("mosa_n3", AdapterConfig::mosa(8, 3), 1.0),
        ("mosa_n4", AdapterConfig::mosa(8, 4), 1.0),
    ];
    let mut rows: Vec<DeskRow> = methods.iter().map(|(name, ..)| DeskRow { name, merge: vec![], fixed: vec![] }).collect();
    for seed in 0..SEEDS {
        let (train_set, val_set) = gen_synthetic(&SyntheticSpec { seed, ..Default::default() }).map_err(err)?;
        for (row, (_, acfg, reg)) in rows.iter_mut().zip(&methods) {
            let mut model = build_backbone(&bcfg, &mut Rng::new(seed)).map_err(err)?;
            set_trainable_flags(&mut model, acfg.method);
            let mut adapters = AdapterSet::build(acfg, bcfg.embed_dim, bcfg.num_layers, seed).map_err(err)?;
            let plan = TrainPlan { epochs: EPOCHS, warmup_epochs: EPOCHS / 10, alpha: *reg, beta: *reg, seed, ..Default::default() };
            train(&mut model, &mut adapters, &train_set, None, &plan).map_err(err)?;
            let merge = evaluate(&model, &adapters, &val_set, InferenceMode::Merge, 128).map_err(err)?.top1;
            let fixed = evaluate(&model, &adapters, &val_set, InferenceMode::Fixed(0), 128).map_err(err)?.top1;
            println!("    seed {seed} {:<13} merge {merge:.4} fixed {fixed:.4}", row.name);
            row.merge.push(merge);
            row.fixed.push(fixed);
        }
    }
    println!("    means over seeds 0-{}:", SEEDS - 1);
    for r in &rows {
        println!("    {:<13} merge {:.4} fixed {:.4}", r.name, mean(&r.merge), mean(&r.fixed));
    }
    let probe = mean(&rows[0].merge);
    let adapter = mean(&rows[1].merge);
    let mixtures = &rows[2..];
    let mut failures = vec![];
    let within = mixtures.iter().all(|r| mean(&r.merge) >= adapter - 0.005);
    let above = mixtures.iter().any(|r| mean(&r.merge) > adapter);
    if !(within && above) {
        let got: Vec<String> = mixtures.iter().map(|r| format!("{} {:.4}", r.name, mean(&r.merge))).collect();
        failures.push(format!("(a) adapter {adapter:.4} vs {}", got.join(", ")));
    }
    let bad_merge: Vec<String> = mixtures
        .iter()
        .filter(|r| mean(&r.merge) < mean(&r.fixed))
        .map(|r| format!("{} merge {:.4} < fixed {:.4}", r.name, mean(&r.merge), mean(&r.fixed)))
        .collect();
    if !bad_merge.is_empty() {
        failures.push(format!("(b) {}", bad_merge.join(", ")));
    }
    if adapter - probe < 0.05 {
        failures.push(format!("(c) adapter {adapter:.4} vs probe {probe:.4}"));
    }
    if failures.is_empty() {
        Ok(format!("adapter {adapter:.4}, probe {probe:.4}, seeds 0-{}", SEEDS - 1))
    } else {
        Err(format!("{}; seeds 0-{}", failures.join("; "), SEEDS - 1))
    }
}

fn loss_arithmetic() -> Outcome {
    let mut tape = Tape::new();
    let logits = |tape: &mut Tape, p: [f64; 2]| tape.leaf(&Tensor::new([1, 2], p.iter().map(|v| v.ln()).collect()).unwrap());
    let l1 = logits(&mut tape, [0.5, 0.5]);
    let l2 = logits(&mut tape, [0.25, 0.75]);
    let (_, terms) = consistency_objective(
        &mut tape,
        PassOutputs { logits: l1, features: &[] },
        Some(PassOutputs { logits: l2, features: &[] }),
        &[0],
        1.0,
        0.0,
    )
    .map_err(err)?;
    let gap = (terms.total - 0.830474).abs();
    ensure(gap <= 1e-6, || format!("loss {:.9}", terms.total))?;
    Ok(format!("loss {:.6}", terms.total))
}

fn formats() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (data, _) = synthetic(4, 5, 8, 2);
    let dpath = dir.path().join("d.mosa-data");
    data.save(&dpath).map_err(err)?;
    let back = Dataset::load(&dpath).map_err(err)?;
    ensure(back == data, || "dataset changed on reload".into())?;
    let dbytes = std::fs::read(&dpath).map_err(|e| e.to_string())?;
    ensure(back.to_bytes().map_err(err)? == dbytes, || "dataset bytes differ on resave".into())?;

    let mut cfg = RunConfig::default();
    cfg.backbone = BackboneConfig { image_size: 8, ..tiny_backbone() };
    cfg.adapter = AdapterConfig::mosa(4, 3);
    cfg.plan.epochs = 1;
    cfg.plan.warmup_epochs = 0;
    cfg.plan.batch_size = 8;
    let mut state = RunState::initialize(&cfg).map_err(err)?;
    let out = train(&mut state.model, &mut state.adapters, &data, None, &cfg.plan).map_err(err)?;
    state.optimizer = Some(out.optimizer);
    let cpath = dir.path().join("s.mosa-ckpt");
    state.save(&cpath).map_err(err)?;
    let loaded = RunState::load(&cpath).map_err(err)?;
    ensure(loaded == state, || "checkpoint state changed on reload".into())?;
    let cbytes = std::fs::read(&cpath).map_err(|e| e.to_string())?;
    ensure(loaded.to_checkpoint().and_then(|c| c.to_bytes()).map_err(err)? == cbytes, || "checkpoint bytes differ on resave".into())?;

    let mut corrupt = cbytes.clone();
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 0x01;
    match Checkpoint::from_bytes(&corrupt) {
        Err(e @ MosaError::Corruption(_)) => ensure(e.exit_code() == 3, || format!("corruption exit code {}", e.exit_code()))?,
        other => return Err(format!("flipped payload byte gave {other:?}")),
    }
    for (what, bytes) in [("checkpoint", &cbytes), ("dataset", &dbytes)] {
        for cut in [0, 3, 11, bytes.len() / 3, bytes.len() - 1] {
            let r = if what == "checkpoint" {
                Checkpoint::from_bytes(&bytes[..cut]).map(|_| ())
            } else {
                Dataset::from_bytes(&bytes[..cut]).map(|_| ())
            };
            match r {
                Err(e @ MosaError::Truncated(_)) => ensure(e.exit_code() == 3, || "truncation exit code".into())?,
                other => return Err(format!("{what} cut at {cut} gave {other:?}")),
            }
        }
    }
    Ok(format!("dataset {} B and checkpoint {} B round trip; CRC and truncation rejected (exit 3)", dbytes.len(), cbytes.len()))
}

struct Criterion {
    id: u32,
    title: &'static str,
    budget_secs: f64,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { id: 1, title: "mask partitions", budget_secs: 5.0, run: partitions },
        Criterion { id: 2, title: "gradient oracle", budget_secs: 60.0, run: gradients },
        Criterion { id: 3, title: "frozen-entry bit-exactness", budget_secs: 120.0, run: frozen_entries },
        Criterion { id: 4, title: "merge identity and additivity", budget_secs: 10.0, run: merge_identity },
        Criterion { id: 5, title: "single-expert degeneracy", budget_secs: 120.0, run: degeneracy },
        Criterion { id: 6, title: "parameter accounting", budget_secs: 1.0, run: parameter_counts },
        Criterion { id: 7, title: "inference-cost law", budget_secs: 10.0, run: inference_cost },
        Criterion { id: 8, title: "desk-scale ordering", budget_secs: 1800.0, run: desk_ordering },
        Criterion { id: 9, title: "loss arithmetic", budget_secs: 1.0, run: loss_arithmetic },
        Criterion { id: 10, title: "format round trips", budget_secs: 5.0, run: formats },
    ];
    // Harness flags such as `--nocapture` are ignored; bare numbers select criteria.
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = vec![];
    for c in criteria.iter().filter(|c| selected.is_empty() || selected.contains(&c.id)) {
        let start = Instant::now();
        let result = (c.run)();
        let secs = start.elapsed().as_secs_f64();
        let result = match result {
            Ok(msg) if secs > c.budget_secs => Err(format!("{msg}; took {secs:.1}s over the {:.0}s budget", c.budget_secs)),
            r => r,
        };
        match result {
            Ok(msg) => println!("PASS criterion {}: {} - {msg} [{secs:.2}s]", c.id, c.title),
            Err(msg) => {
                println!("FAIL criterion {}: {} - {msg} [{secs:.2}s]", c.id, c.title);
                failed.push(c.id);
            }
        }
    }
    if !failed.is_empty() {
        println!("acceptance: {} criterion(s) failed: {failed:?}", failed.len());
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
