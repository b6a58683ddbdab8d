//! Expert merging, inference modes, evaluation and parameter accounting.

use std::borrow::Cow;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::adapters::{AdapterConfig, AdapterKind, AdapterSet, Insertion, MaskSet, Method, Routing};
use crate::backbone::{BackboneConfig, FrozenModel};
use crate::data::Dataset;
use crate::error::{MosaError, Result};
use crate::rng::{streams, Rng};
use crate::tensor::{Tape, Tensor};
use crate::training::sample_single;

/// Reassembles a dense matrix from its expert views: entry `e` is taken from
/// the view of the expert that owns it.
pub fn jigsaw(views: &[Tensor], masks: &MaskSet) -> Result<Tensor> {
    masks.validate()?;
    if views.len() != masks.num_experts() {
        return Err(MosaError::Invariant(format!(
            "{} expert views for {} masks",
            views.len(),
            masks.num_experts()
        )));
    }
    let shape = [masks.rows(), masks.cols()];
    if let Some(v) = views.iter().find(|v| v.shape() != shape) {
        return Err(MosaError::Dimension(format!("expert view {:?} for masks of {shape:?}", v.shape())));
    }
    let n = masks.rows() * masks.cols();
    Tensor::new(shape, (0..n).map(|e| views[masks.owner(e)].data()[e]).collect())
}

/// Merges every split weight back into one dense adapter. The result
/// forwards exactly like the shared weights with no masks applied.
pub fn merge_experts(adapters: &AdapterSet) -> Result<AdapterSet> {
    let mut out = adapters.clone();
    for w in out.split_weights_mut() {
        let Some(masks) = w.experts.take() else { continue };
        let views = (0..masks.num_experts())
            .map(|i| w.param.tensor.hadamard(masks.mask(i)))
            .collect::<Result<Vec<_>>>()?;
        let merged = jigsaw(&views, &masks)?;
        let trainable = w.param.trainable();
        w.param.tensor = merged.with_grad(trainable);
    }
    out.merged = true;
    Ok(out)
}

/// How expert adapters are combined at test time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferenceMode {
    /// Always expert `k`.
    Fixed(usize),
    /// A fresh uniformly drawn expert per batch.
    Stochastic { seed: u64 },
    /// Mean logits of all `N` single-expert forwards.
    Ensemble,
    /// One forward through the merged dense adapter.
    Merge,
}

impl InferenceMode {
    pub fn name(&self) -> &'static str {
        match self {
            InferenceMode::Fixed(_) => "fixed",
            InferenceMode::Stochastic { .. } => "stochastic",
            InferenceMode::Ensemble => "ensemble",
            InferenceMode::Merge => "merge",
        }
    }

    /// Parses a mode name; `fixed_index` and `seed` fill in the parameters.
    pub fn parse(name: &str, fixed_index: usize, seed: u64) -> Result<Self> {
        match name {
            "fixed" => Ok(InferenceMode::Fixed(fixed_index)),
            "stochastic" => Ok(InferenceMode::Stochastic { seed }),
            "ensemble" => Ok(InferenceMode::Ensemble),
            "merge" => Ok(InferenceMode::Merge),
            _ => Err(MosaError::Config(format!(
                "unknown inference mode '{name}' (expected fixed, stochastic, ensemble, merge)"
            ))),
        }
    }

    fn seed(&self) -> u64 {
        match self {
            InferenceMode::Stochastic { seed } => *seed,
            _ => 0,
        }
    }
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InferenceMode {
    type Err = MosaError;

    fn from_str(s: &str) -> Result<Self> {
        InferenceMode::parse(s, 0, 0)
    }
}

/// Runs batches through a model in one inference mode, keeping count of
/// the multiply-accumulates spent inside adapter branches.
pub struct Predictor<'a> {
    model: &'a FrozenModel,
    adapters: Cow<'a, AdapterSet>,
    mode: InferenceMode,
    rng: Rng,
    adapter_macs: u64,
}

impl<'a> Predictor<'a> {
    pub fn new(model: &'a FrozenModel, adapters: &'a AdapterSet, mode: InferenceMode) -> Result<Self> {
        if let InferenceMode::Fixed(k) = mode {
            let n = if adapters.has_experts() && !adapters.merged { adapters.num_experts() } else { 1 };
            if k >= n {
                return Err(MosaError::Index(format!("fixed expert index {k} out of range for {n} experts")));
            }
        }
        let adapters = match mode {
            InferenceMode::Merge if !adapters.merged && adapters.has_experts() => {
                Cow::Owned(merge_experts(adapters)?)
            }
            _ => Cow::Borrowed(adapters),
        };
        Ok(Predictor {
            model,
            adapters,
            mode,
            rng: Rng::new(mode.seed()).fork(streams::INFERENCE),
            adapter_macs: 0,
        })
    }

    pub fn adapter_macs(&self) -> u64 {
        self.adapter_macs
    }

    fn forward(&mut self, images: &Tensor, routing: &Routing) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.model.forward(&mut tape, images, Some(&self.adapters), routing)?;
        self.adapter_macs += tape.adapter_macs();
        Ok(tape.tensor(out.logits))
    }

    /// Logits `[B, classes]` for a `[B, C, H, W]` batch.
    pub fn logits(&mut self, images: &Tensor) -> Result<Tensor> {
        let set = self.adapters.clone();
        let experts = set.has_experts() && !set.merged;
        match self.mode {
            _ if !experts => self.forward(images, &Routing::Dense),
            InferenceMode::Merge => self.forward(images, &Routing::Dense),
            InferenceMode::Fixed(k) => self.forward(images, &Routing::uniform(&set, k)),
            InferenceMode::Stochastic { .. } => {
                let routing = sample_single(&mut self.rng, &set)?;
                self.forward(images, &routing)
            }
            InferenceMode::Ensemble => {
                let n = set.num_experts();
                let mut acc = self.forward(images, &Routing::uniform(&set, 0))?;
                for k in 1..n {
                    let l = self.forward(images, &Routing::uniform(&set, k))?;
                    for (a, b) in acc.data_mut().iter_mut().zip(l.data()) {
                        *a += b;
                    }
                }
                let inv = n as f64;
                acc.data_mut().iter_mut().for_each(|a| *a /= inv);
                Ok(acc)
            }
        }
    }
}

/// Index of the largest entry per row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.cols();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Logits for a single batch.
pub fn infer(model: &FrozenModel, adapters: &AdapterSet, images: &Tensor, mode: InferenceMode) -> Result<Tensor> {
    Predictor::new(model, adapters, mode)?.logits(images)
}

/// Header of [`EvalReport::csv_row`].
pub const EVAL_HEADER: &str = "mode,top1,params_excl_head,flops_adapter,seed";

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mode: InferenceMode,
    pub top1: f64,
    pub num_samples: usize,
    /// Trainable parameters, classifier head excluded.
    pub params_excl_head: usize,
    /// Adapter-branch multiply-accumulates over the whole evaluation set.
    pub flops_adapter: u64,
    pub seed: u64,
}

impl EvalReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{},{},{}",
            self.mode.name(),
            self.top1,
            self.params_excl_head,
            self.flops_adapter,
            self.seed
        )
    }
}

/// Top-1 accuracy of `model` + `adapters` on `data`.
pub fn evaluate(
    model: &FrozenModel,
    adapters: &AdapterSet,
    data: &Dataset,
    mode: InferenceMode,
    batch_size: usize,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(MosaError::Data("evaluation set is empty".into()));
    }
    if batch_size == 0 {
        return Err(MosaError::Config("batch size must be at least 1".into()));
    }
    let mut pred = Predictor::new(model, adapters, mode)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(batch_size) {
        let (images, labels) = data.batch(chunk)?;
        let logits = pred.logits(&images)?;
        correct += argmax_rows(&logits).iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(EvalReport {
        mode,
        top1: correct as f64 / data.len() as f64,
        num_samples: data.len(),
        params_excl_head: count_trainable_params(model, adapters),
        flops_adapter: pred.adapter_macs(),
        seed: mode.seed(),
    })
}

/// Writes `label,f0,..,f{d-1}` rows of the pooled final-block features.
pub fn dump_features(
    model: &FrozenModel,
    adapters: &AdapterSet,
    data: &Dataset,
    path: impl AsRef<Path>,
    batch_size: usize,
) -> Result<()> {
    let merged;
    let adapters = if adapters.has_experts() && !adapters.merged {
        merged = merge_experts(adapters)?;
        &merged
    } else {
        adapters
    };
    let mut out = String::from("label");
    for j in 0..model.cfg.embed_dim {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (images, labels) = data.batch(chunk)?;
        let mut tape = Tape::new();
        let o = model.forward(&mut tape, &images, Some(adapters), &Routing::Dense)?;
        let feats = tape.tensor(o.pooled);
        for (row, l) in feats.data().chunks(model.cfg.embed_dim).zip(labels) {
            out.push_str(&l.to_string());
            for v in row {
                out.push_str(&format!(",{v:e}"));
            }
            out.push('\n');
        }
    }
    let path = path.as_ref();
    fs::write(path, out).map_err(|e| MosaError::io(path, e))
}

/// Trainable parameters outside the classifier head.
pub fn count_trainable_params(model: &FrozenModel, adapters: &AdapterSet) -> usize {
    model.trainable_backbone_count() + adapters.trainable_count()
}

/// Backbone biases unfrozen by bias tuning: linear biases and norm shifts.
fn backbone_bias_count(cfg: &BackboneConfig) -> usize {
    let d = cfg.embed_dim;
    d + cfg.num_layers * (7 * d + cfg.mlp_dim()) + d
}

/// Trainable parameters (head excluded) for a configuration, computed
/// without materialising the backbone. Mask-independent, so any seed works.
pub fn count_params_for_config(backbone: &BackboneConfig, adapter: &AdapterConfig) -> Result<usize> {
    backbone.validate()?;
    adapter.validate(backbone.embed_dim)?;
    let d = backbone.embed_dim;
    let r = adapter.bottleneck_dim;
    let retained = |rows: usize, cols: usize| -> usize {
        if adapter.method.is_pruned() {
            ((adapter.retain_fraction * (rows * cols) as f64).round() as usize).max(1)
        } else {
            rows * cols
        }
    };
    let bias = if adapter.use_bias { r + d } else { 0 };
    let per_layer = match adapter.kind() {
        None => 0,
        Some(AdapterKind::Adapter) => {
            let per = retained(d, r) + retained(r, d) + bias;
            match adapter.insertion {
                Insertion::Houlsby => 2 * per,
                _ => per,
            }
        }
        Some(AdapterKind::Lora) => 2 * (retained(d, r) + retained(r, d)),
    };
    let extra = if adapter.method == Method::BiasTuning { backbone_bias_count(backbone) } else { 0 };
    Ok(backbone.num_layers * per_layer + extra)
}
