use std::fmt::Write as _;

use log::info;

use super::loss::{consistency_objective, LossTerms, PassOutputs};
use super::optimizer::{masked_step, AdamW, MaskedUpdate, OptimizerState};
use super::sampler::sample_routing;
use super::{lr_at, TrainPlan};
use crate::adapters::{AdapterSet, GradMask, Routing};
use crate::backbone::{patchify, FrozenModel};
use crate::data::{augment, Dataset};
use crate::error::{MosaError, Result};
use crate::merge::{evaluate, InferenceMode};
use crate::rng::{streams, Rng};
use crate::tensor::{Tape, Tensor};

/// Header of the metrics CSV written by [`metrics_csv`].
pub const METRICS_HEADER: &str = "epoch,step,lr,loss,ce,kl,align_mse,val_top1";

/// One row of the metrics log. Epoch rows carry batch-averaged terms; step
/// rows carry the values of a single batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Optimizer steps completed when the row was recorded.
    pub step: usize,
    pub lr: f64,
    pub terms: LossTerms,
    pub val_top1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochMetrics>,
    /// Per-step rows, present only with [`TrainPlan::log_steps`].
    pub steps: Vec<EpochMetrics>,
    pub optimizer: OptimizerState,
}

/// What an observer sees after every optimizer step.
#[derive(Debug)]
pub struct StepInfo<'a> {
    /// 0-based index of the step just taken.
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub batch: &'a [usize],
    pub pass1: &'a Routing,
    /// `None` when the objective needed a single pass.
    pub pass2: Option<&'a Routing>,
    pub terms: LossTerms,
}

pub type StepObserver<'o> = dyn FnMut(&StepInfo<'_>, &FrozenModel, &AdapterSet) + 'o;

fn check_inputs(model: &FrozenModel, adapters: &AdapterSet, data: &Dataset, plan: &TrainPlan) -> Result<()> {
    plan.validate()?;
    let cfg = &model.cfg;
    if data.is_empty() {
        return Err(MosaError::Data("training set is empty".into()));
    }
    if data.channels != cfg.channels || data.height != cfg.image_size || data.width != cfg.image_size {
        return Err(MosaError::Data(format!(
            "dataset images are {}x{}x{} but the backbone expects {}x{}x{}",
            data.channels, data.height, data.width, cfg.channels, cfg.image_size, cfg.image_size
        )));
    }
    if data.num_classes != cfg.num_classes {
        return Err(MosaError::Data(format!(
            "dataset has {} classes, classifier has {}",
            data.num_classes, cfg.num_classes
        )));
    }
    if plan.two_pass_distinct && adapters.has_experts() && adapters.num_experts() < 2 {
        return Err(MosaError::Config("two_pass_distinct needs at least 2 experts".into()));
    }
    if adapters.merged {
        return Err(MosaError::Config("cannot train a merged adapter set".into()));
    }
    Ok(())
}

fn augment_batch(images: &mut Tensor, plan: &TrainPlan, rng: &mut Rng) {
    if !(plan.augment.crop || plan.augment.flip) {
        return;
    }
    let s = images.shape().to_vec();
    let (c, h, w) = (s[1], s[2], s[3]);
    for img in images.data_mut().chunks_mut(c * h * w) {
        if plan.augment.crop {
            let out = augment::random_resized_crop(img, c, h, w, rng);
            img.copy_from_slice(&out);
        }
        if plan.augment.flip && rng.uniform() < 0.5 {
            augment::hflip(img, w);
        }
    }
}

/// Runs the training loop; see [`train_with_observer`].
pub fn train(
    model: &mut FrozenModel,
    adapters: &mut AdapterSet,
    data: &Dataset,
    val: Option<&Dataset>,
    plan: &TrainPlan,
) -> Result<TrainOutcome> {
    train_with_observer(model, adapters, data, val, plan, &mut |_, _, _| {})
}

/// Trains the adapters (and any other trainable parameter) on `data`.
///
/// Each epoch visits a fresh shuffle of the samples. Each batch draws
/// experts for two stochastic passes, evaluates the consistency objective
/// and takes one AdamW step masked to the entries the passes used. After
/// every epoch the merged model is scored on `val` when given.
pub fn train_with_observer(
    model: &mut FrozenModel,
    adapters: &mut AdapterSet,
    data: &Dataset,
    val: Option<&Dataset>,
    plan: &TrainPlan,
    observer: &mut StepObserver<'_>,
) -> Result<TrainOutcome> {
    check_inputs(model, adapters, data, plan)?;
    if adapters.has_experts() && adapters.num_experts() == 1 && !plan.needs_second_pass() {
        info!("num_experts=1 with alpha=beta=0: training follows the standard adapter path");
    }
    let root = Rng::new(plan.seed);
    let mut order_rng = root.fork(streams::DATA_ORDER);
    let mut expert_rng = root.fork(streams::EXPERTS);
    let mut aug_rng = root.fork(streams::AUGMENT);
    let hp = AdamW::from_plan(plan);
    let n = data.len();
    let steps_per_epoch = n.div_ceil(plan.batch_size);
    let aligned = plan.alignment.blocks(model.cfg.num_layers);

    let mut state = OptimizerState::default();
    let mut outcome = TrainOutcome { epochs: vec![], steps: vec![], optimizer: OptimizerState::default() };
    let mut step = 0usize;
    for epoch in 0..plan.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order_rng.shuffle(&mut order);
        let mut sum = LossTerms::default();
        let mut lr = 0.0;
        for batch in order.chunks(plan.batch_size) {
            let (mut images, labels) = data.batch(batch)?;
            augment_batch(&mut images, plan, &mut aug_rng);
            let (r1, r2) = sample_routing(&mut expert_rng, adapters, plan.two_pass_distinct)?;
            let second_pass = plan.needs_second_pass();

            let mut tape = Tape::new();
            let px = tape.constant(&patchify(&images, &model.cfg)?);
            let out1 = model.forward_patches(&mut tape, px, Some(adapters), &r1)?;
            let out2 = if second_pass {
                Some(model.forward_patches(&mut tape, px, Some(adapters), &r2)?)
            } else {
                None
            };
            let first = PassOutputs { logits: out1.logits, features: &out1.features[aligned.clone()] };
            let second =
                out2.as_ref().map(|o| PassOutputs { logits: o.logits, features: &o.features[aligned.clone()] });
            let (loss, terms) = consistency_objective(&mut tape, first, second, &labels, plan.alpha, plan.beta)?;
            tape.backward(loss)?;

            lr = lr_at(step, plan, steps_per_epoch);
            let passes: Vec<&Routing> = if second_pass { vec![&r1, &r2] } else { vec![&r1] };
            let adapter_masks = adapters.grad_masks(&passes);
            let mut grads = vec![];
            let mut masks = vec![];
            for p in model.params().into_iter().filter(|p| p.trainable()) {
                grads.push(param_grad(&tape, &p.name, p.tensor.numel())?);
                masks.push(GradMask::All);
            }
            for (p, m) in adapters.params().into_iter().zip(adapter_masks) {
                if p.trainable() {
                    grads.push(param_grad(&tape, &p.name, p.tensor.numel())?);
                    masks.push(m);
                }
            }
            let mut updates: Vec<MaskedUpdate<'_>> = model
                .params_mut()
                .into_iter()
                .chain(adapters.params_mut())
                .filter(|p| p.trainable())
                .zip(grads.iter().zip(&masks))
                .map(|(param, (grad, mask))| MaskedUpdate { param, grad, mask })
                .collect();
            masked_step(&mut updates, &mut state, lr, &hp)?;
            drop(updates);

            let info = StepInfo {
                step,
                epoch,
                lr,
                batch,
                pass1: &r1,
                pass2: second_pass.then_some(&r2),
                terms,
            };
            observer(&info, model, adapters);
            step += 1;
            if plan.log_steps {
                outcome.steps.push(EpochMetrics { epoch, step, lr, terms, val_top1: None });
            }
            sum.total += terms.total;
            sum.ce += terms.ce;
            sum.kl_12 += terms.kl_12;
            sum.kl_21 += terms.kl_21;
            sum.align_mse += terms.align_mse;
        }
        let k = steps_per_epoch as f64;
        let mean = LossTerms {
            total: sum.total / k,
            ce: sum.ce / k,
            kl_12: sum.kl_12 / k,
            kl_21: sum.kl_21 / k,
            align_mse: sum.align_mse / k,
        };
        let val_top1 = match val {
            Some(v) => Some(evaluate(model, adapters, v, InferenceMode::Merge, plan.eval_batch_size)?.top1),
            None => None,
        };
        info!(
            "epoch {}/{} step {step} lr {lr:.3e} loss {:.4} ce {:.4}{}",
            epoch + 1,
            plan.epochs,
            mean.total,
            mean.ce,
            val_top1.map(|t| format!(" val_top1 {t:.4}")).unwrap_or_default()
        );
        outcome.epochs.push(EpochMetrics { epoch, step, lr, terms: mean, val_top1 });
    }
    outcome.optimizer = state;
    Ok(outcome)
}

fn param_grad(tape: &Tape, name: &str, numel: usize) -> Result<Vec<f64>> {
    match tape.param_grad(name) {
        Some(g) => Ok(g.to_vec()),
        None if tape.bound_var(name).is_some() => Ok(vec![0.0; numel]),
        None => Err(MosaError::Internal(format!("trainable parameter {name} never entered the graph"))),
    }
}

/// Renders the metrics log: epoch rows, followed by step rows if any.
pub fn metrics_csv(outcome: &TrainOutcome) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for row in outcome.epochs.iter().chain(&outcome.steps) {
        let val = row.val_top1.map(|v| format!("{v:.6}")).unwrap_or_default();
        let t = &row.terms;
        let _ = writeln!(
            s,
            "{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{}",
            row.epoch,
            row.step,
            row.lr,
            t.total,
            t.ce,
            t.kl(),
            t.align_mse,
            val
        );
    }
    s
}
