//! Independent oracles for training behaviour.

use std::collections::BTreeMap;

use mosa::adapters::{AdapterSet, Routing};
use mosa::backbone::FrozenModel;
use mosa::data::Dataset;
use mosa::rng::{streams, Rng};
use mosa::tensor::Tape;
use mosa::training::{lr_at, sample_routing, train_with_observer, TrainPlan};
use mosa::Result;

/// Snapshot of every trainable value after each step.
pub type Trajectory = Vec<Vec<Vec<f64>>>;

fn trainable_values(model: &FrozenModel, adapters: &AdapterSet) -> Vec<Vec<f64>> {
    model
        .params()
        .into_iter()
        .chain(adapters.params())
        .filter(|p| p.trainable())
        .map(|p| p.tensor.data().to_vec())
        .collect()
}

/// A plain single-pass trainer for a dense adapter: shuffle, forward, CE,
/// backward, unmasked AdamW. Written without the library training loop.
pub fn reference_trajectory(
    model: &mut FrozenModel,
    adapters: &mut AdapterSet,
    data: &Dataset,
    plan: &TrainPlan,
) -> Result<Trajectory> {
    let mut order_rng = Rng::new(plan.seed).fork(streams::DATA_ORDER);
    let n = data.len();
    let spe = n.div_ceil(plan.batch_size);
    let (b1, b2) = plan.betas;
    let mut m: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut v: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut out = vec![];
    let mut t = 0i32;
    for _ in 0..plan.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order_rng.shuffle(&mut order);
        for batch in order.chunks(plan.batch_size) {
            let (images, labels) = data.batch(batch)?;
            let mut tape = Tape::new();
            let o = model.forward(&mut tape, &images, Some(adapters), &Routing::Dense)?;
            let loss = tape.cross_entropy(o.logits, &labels)?;
            tape.backward(loss)?;
            let lr = lr_at(t as usize, plan, spe);
            t += 1;
            let bc1 = 1.0 - b1.powi(t);
            let bc2 = 1.0 - b2.powi(t);
            let decay = 1.0 - lr * plan.weight_decay;
            for p in model.params_mut().into_iter().chain(adapters.params_mut()) {
                if !p.trainable() {
                    continue;
                }
                let k = p.tensor.numel();
                let g = tape.param_grad(&p.name).map(<[f64]>::to_vec).unwrap_or(vec![0.0; k]);
                let mm = m.entry(p.name.clone()).or_insert(vec![0.0; k]);
                let vv = v.entry(p.name.clone()).or_insert(vec![0.0; k]);
                for (e, w) in p.tensor.data_mut().iter_mut().enumerate() {
                    *w *= decay;
                    mm[e] = b1 * mm[e] + (1.0 - b1) * g[e];
                    vv[e] = b2 * vv[e] + (1.0 - b2) * g[e] * g[e];
                    *w -= lr * (mm[e] / bc1) / ((vv[e] / bc2).sqrt() + plan.eps);
                }
            }
            out.push(trainable_values(model, adapters));
        }
    }
    Ok(out)
}

/// Library trajectory recorded through the step observer.
pub fn library_trajectory(
    model: &mut FrozenModel,
    adapters: &mut AdapterSet,
    data: &Dataset,
    plan: &TrainPlan,
) -> Result<Trajectory> {
    let mut out = vec![];
    train_with_observer(model, adapters, data, None, plan, &mut |_, m, a| out.push(trainable_values(m, a)))?;
    Ok(out)
}

/// Result of replaying expert sampling and auditing every up-projection entry.
#[derive(Debug, Default)]
pub struct Audit {
    pub steps: usize,
    /// Entries that changed while their owner was inactive.
    pub violations: Vec<String>,
    /// Observed routings that differed from the seed replay.
    pub replay_mismatches: usize,
    /// (entry, step) pairs where an active entry moved.
    pub active_moves: usize,
    pub backbone_unchanged: bool,
}

/// Trains with `plan` and checks, after every step, that each split weight
/// entry changed only if its owning expert was drawn in one of the step's
/// passes. Routings are re-derived from the seed, independent of the trainer.
pub fn frozen_entry_audit(model: &mut FrozenModel, adapters: &mut AdapterSet, data: &Dataset, plan: &TrainPlan) -> Result<Audit> {
    let backbone_before = model.backbone_bytes();
    let mut replay_rng = Rng::new(plan.seed).fork(streams::EXPERTS);
    let replay_set = adapters.clone();
    let split_names: Vec<String> = adapters
        .split_weights()
        .into_iter()
        .filter(|w| w.experts.is_some())
        .map(|w| w.param.name.clone())
        .collect();
    let snapshot = |a: &AdapterSet| -> Vec<Vec<f64>> {
        a.split_weights().into_iter().filter(|w| w.experts.is_some()).map(|w| w.param.tensor.data().to_vec()).collect()
    };
    let mut prev = snapshot(adapters);
    let mut audit = Audit::default();
    let mut failure = None;
    train_with_observer(model, adapters, data, None, plan, &mut |info, _, a| {
        let (e1, e2) = match sample_routing(&mut replay_rng, &replay_set, plan.two_pass_distinct) {
            Ok(r) => r,
            Err(e) => {
                failure.get_or_insert(e.to_string());
                return;
            }
        };
        if &e1 != info.pass1 || (info.pass2.is_some() && Some(&e2) != info.pass2) {
            audit.replay_mismatches += 1;
        }
        let passes: Vec<&Routing> = if info.pass2.is_some() { vec![&e1, &e2] } else { vec![&e1] };
        let now = snapshot(a);
        let splits: Vec<_> = a.split_weights().into_iter().filter(|w| w.experts.is_some()).collect();
        for (wi, w) in splits.iter().enumerate() {
            let masks = w.experts.as_ref().unwrap();
            let module = a
                .modules()
                .iter()
                .position(|m| m.split_weights().iter().any(|s| s.param.name == w.param.name))
                .unwrap();
            let is_up = a.modules()[module].split_weights()[1].param.name == w.param.name;
            let used: Vec<usize> = passes
                .iter()
                .filter_map(|r| match r {
                    Routing::Experts(p) => if is_up { p[module].up } else { p[module].down },
                    Routing::Dense => None,
                })
                .collect();
            for e in 0..now[wi].len() {
                let changed = now[wi][e].to_bits() != prev[wi][e].to_bits();
                let active = used.contains(&masks.owner(e));
                if changed && !active {
                    audit.violations.push(format!("{}[{e}] at step {}", split_names[wi], info.step));
                }
                if changed && active {
                    audit.active_moves += 1;
                }
            }
        }
        prev = now;
        audit.steps += 1;
    })?;
    if let Some(f) = failure {
        return Err(mosa::MosaError::Internal(f));
    }
    audit.backbone_unchanged = model.backbone_bytes() == backbone_before;
    Ok(audit)
}
