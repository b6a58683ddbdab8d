use super::config::{Activation, AdapterConfig, AdapterKind, ExpertPolicy, Insertion};
use super::masks::{split_masks, MaskSet, RetainMask};
use crate::error::{MosaError, Result};
use crate::rng::{streams, Rng};
use crate::tensor::{Param, Tape, Tensor, Var};

/// Which expert each split projection of one module uses in a forward pass.
/// A side that is not split carries `None`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ExpertPick {
    pub down: Option<usize>,
    pub up: Option<usize>,
}

/// Expert selection for a whole adapter set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Routing {
    /// Full shared weights (standard adapter, or the merged mixture).
    Dense,
    /// One pick per module, in [`AdapterSet::modules`] order.
    Experts(Vec<ExpertPick>),
}

impl Routing {
    /// Every module uses expert `k` on each split side.
    pub fn uniform(set: &AdapterSet, k: usize) -> Routing {
        Routing::Experts(set.modules().iter().map(|m| m.pick_all(k)).collect())
    }

    fn pick(&self, module: usize) -> Option<&ExpertPick> {
        match self {
            Routing::Dense => None,
            Routing::Experts(p) => p.get(module),
        }
    }
}

/// Which entries of a parameter an optimizer step may touch.
#[derive(Debug, Clone, PartialEq)]
pub enum GradMask {
    All,
    Entries(Vec<bool>),
}

impl GradMask {
    pub fn is_active(&self, e: usize) -> bool {
        match self {
            GradMask::All => true,
            GradMask::Entries(b) => b[e],
        }
    }
}

/// A projection matrix stored densely, optionally split into expert views
/// and optionally pruned by a fixed retain mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitWeight {
    pub param: Param,
    pub experts: Option<MaskSet>,
    pub retain: Option<RetainMask>,
}

impl SplitWeight {
    fn dense(param: Param) -> Self {
        SplitWeight { param, experts: None, retain: None }
    }

    pub fn num_experts(&self) -> usize {
        self.experts.as_ref().map_or(1, MaskSet::num_experts)
    }

    /// `W ⊙ M_i`: the weight as seen by expert `i`.
    pub fn expert_view(&self, i: usize) -> Result<Tensor> {
        match &self.experts {
            Some(m) if i < m.num_experts() => self.param.tensor.hadamard(m.mask(i)),
            Some(m) => Err(MosaError::Index(format!(
                "expert {i} out of range for {} experts of {}",
                m.num_experts(),
                self.param.name
            ))),
            None => Ok(self.param.tensor.clone()),
        }
    }

    /// Binds the weight on `tape`, masked for expert `pick` when given.
    pub fn bind(&self, tape: &mut Tape, pick: Option<usize>) -> Result<Var> {
        let mut w = tape.bind(&self.param);
        if let Some(r) = &self.retain {
            let key = format!("{}#retain", self.param.name);
            let m = tape.bind_constant(&key, || r.mask().clone());
            w = tape.mul(w, m)?;
        }
        match (&self.experts, pick) {
            (Some(ms), Some(i)) => {
                if i >= ms.num_experts() {
                    return Err(MosaError::Index(format!(
                        "expert {i} out of range for {} experts of {}",
                        ms.num_experts(),
                        self.param.name
                    )));
                }
                let key = format!("{}#expert{i}", self.param.name);
                let m = tape.bind_constant(&key, || ms.mask(i).clone());
                w = tape.mul(w, m)?;
            }
            (None, Some(i)) => {
                return Err(MosaError::Index(format!(
                    "expert {i} requested for unsplit weight {}",
                    self.param.name
                )))
            }
            _ => {}
        }
        Ok(w)
    }

    /// Entries an update may touch after forwards that used `experts`
    /// (plus the dense weight, if `dense_used`).
    pub fn grad_mask(&self, dense_used: bool, experts: &[usize]) -> GradMask {
        let base = match &self.experts {
            Some(ms) if !dense_used => Some(ms.union(experts)),
            _ => None,
        };
        match (base, &self.retain) {
            (None, None) => GradMask::All,
            (Some(b), None) => GradMask::Entries(b),
            (None, Some(r)) => GradMask::Entries(r.bitmap()),
            (Some(b), Some(r)) => GradMask::Entries(b.iter().zip(r.bitmap()).map(|(x, y)| *x && y).collect()),
        }
    }

    /// Trainable entries: the retained ones when pruned, all otherwise.
    pub fn trainable_count(&self) -> usize {
        self.retain.as_ref().map_or(self.param.tensor.numel(), RetainMask::retained)
    }
}

fn activate(tape: &mut Tape, act: Activation, x: Var) -> Result<Var> {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::Gelu => tape.gelu(x),
    }
}

/// Bottleneck adapter `x + scale · f(x W_down + b_down) W_up + b_up` whose
/// projections may be split into sparse experts sharing one dense storage.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseExpertAdapter {
    pub w_down: SplitWeight,
    pub b_down: Option<Param>,
    pub w_up: SplitWeight,
    pub b_up: Option<Param>,
    pub activation: Activation,
    pub scale: f64,
}

impl SparseExpertAdapter {
    pub fn dim(&self) -> usize {
        self.w_down.param.tensor.shape()[0]
    }

    pub fn bottleneck(&self) -> usize {
        self.w_down.param.tensor.shape()[1]
    }

    pub fn num_experts(&self) -> usize {
        self.w_down.num_experts().max(self.w_up.num_experts())
    }

    pub fn is_hierarchical(&self) -> bool {
        self.w_down.experts.is_none() && self.w_up.experts.is_some()
    }

    fn check_pick(&self, pick: &ExpertPick) -> Result<()> {
        if pick.down.is_some() != self.w_down.experts.is_some() {
            return Err(MosaError::Index(format!(
                "down expert index must be given exactly when the down-projection is split ({})",
                self.w_down.param.name
            )));
        }
        if pick.up.is_some() != self.w_up.experts.is_some() {
            return Err(MosaError::Index(format!(
                "up expert index must be given exactly when the up-projection is split ({})",
                self.w_up.param.name
            )));
        }
        Ok(())
    }

    /// Residual branch only, without the `x +`.
    pub fn delta(&self, tape: &mut Tape, x: Var, pick: Option<&ExpertPick>) -> Result<Var> {
        let d = self.dim();
        let r = self.bottleneck();
        if *tape.shape(x).last().unwrap() != d {
            return Err(MosaError::Dimension(format!(
                "adapter of width {d} applied to input {:?}",
                tape.shape(x)
            )));
        }
        if let Some(p) = pick {
            self.check_pick(p)?;
        }
        let rows = (tape.value(x).len() / d) as u64;
        let wd = self.w_down.bind(tape, pick.and_then(|p| p.down))?;
        let mut h = tape.matmul(x, wd)?;
        tape.count_adapter_macs(rows * (d * r) as u64);
        if let Some(b) = &self.b_down {
            let bv = tape.bind(b);
            h = tape.add_bias(h, bv)?;
        }
        h = activate(tape, self.activation, h)?;
        let wu = self.w_up.bind(tape, pick.and_then(|p| p.up))?;
        let mut o = tape.matmul(h, wu)?;
        tape.count_adapter_macs(rows * (r * d) as u64);
        if self.scale != 1.0 {
            o = tape.scale(o, self.scale)?;
        }
        if let Some(b) = &self.b_up {
            let bv = tape.bind(b);
            o = tape.add_bias(o, bv)?;
        }
        Ok(o)
    }

    /// `x + f(x W_down + b_down) W_up + b_up` with the full shared weights.
    pub fn forward_standard(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let d = self.delta(tape, x, None)?;
        tape.add(x, d)
    }

    /// Forward through expert `down_idx` of the down-projection (absent when
    /// it is dense) and expert `up_idx` of the up-projection.
    pub fn forward_expert(&self, tape: &mut Tape, x: Var, down_idx: Option<usize>, up_idx: usize) -> Result<Var> {
        let up = self.w_up.experts.as_ref().map(|_| up_idx);
        if up.is_none() && up_idx != 0 {
            return Err(MosaError::Index(format!("up expert {up_idx} requested for a dense up-projection")));
        }
        let d = self.delta(tape, x, Some(&ExpertPick { down: down_idx, up }))?;
        tape.add(x, d)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.w_down.param];
        v.extend(self.b_down.as_ref());
        v.push(&self.w_up.param);
        v.extend(self.b_up.as_ref());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.w_down.param];
        v.extend(self.b_down.as_mut());
        v.push(&mut self.w_up.param);
        v.extend(self.b_up.as_mut());
        v
    }

    fn grad_masks(&self, dense: bool, downs: &[usize], ups: &[usize]) -> Vec<GradMask> {
        let mut v = vec![self.w_down.grad_mask(dense, downs)];
        if self.b_down.is_some() {
            v.push(GradMask::All);
        }
        v.push(self.w_up.grad_mask(dense, ups));
        if self.b_up.is_some() {
            v.push(GradMask::All);
        }
        v
    }

    pub fn trainable_count(&self) -> usize {
        self.w_down.trainable_count()
            + self.w_up.trainable_count()
            + self.b_down.as_ref().map_or(0, |b| b.tensor.numel())
            + self.b_up.as_ref().map_or(0, |b| b.tensor.numel())
    }
}

/// The projection a LoRA module shadows inside the fused QKV linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoraTarget {
    Query,
    Value,
}

impl LoraTarget {
    /// First output column of the target inside the `[.., 3d]` QKV output.
    pub fn column_offset(self, d: usize) -> usize {
        match self {
            LoraTarget::Query => 0,
            LoraTarget::Value => 2 * d,
        }
    }
}

/// Low-rank update `scale · x A (B ⊙ M)` added to a frozen linear's output.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraModule {
    pub a: SplitWeight,
    pub b: SplitWeight,
    pub target: LoraTarget,
    pub scale: f64,
}

impl LoraModule {
    pub fn dim(&self) -> usize {
        self.a.param.tensor.shape()[0]
    }

    pub fn rank(&self) -> usize {
        self.a.param.tensor.shape()[1]
    }

    pub fn num_experts(&self) -> usize {
        self.b.num_experts()
    }

    /// Delta for input `x`; `expert` selects a split of `B` (dense when absent).
    pub fn delta(&self, tape: &mut Tape, x: Var, expert: Option<usize>) -> Result<Var> {
        let d = self.dim();
        let r = self.rank();
        if *tape.shape(x).last().unwrap() != d {
            return Err(MosaError::Dimension(format!(
                "LoRA of width {d} applied to input {:?}",
                tape.shape(x)
            )));
        }
        let rows = (tape.value(x).len() / d) as u64;
        let a = self.a.bind(tape, None)?;
        let h = tape.matmul(x, a)?;
        let b = self.b.bind(tape, expert)?;
        let mut o = tape.matmul(h, b)?;
        tape.count_adapter_macs(rows * (2 * d * r) as u64);
        if self.scale != 1.0 {
            o = tape.scale(o, self.scale)?;
        }
        Ok(o)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.a.param, &self.b.param]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.a.param, &mut self.b.param]
    }

    pub fn trainable_count(&self) -> usize {
        self.a.trainable_count() + self.b.trainable_count()
    }
}

/// Borrowed view of one module of an [`AdapterSet`].
#[derive(Debug, Clone, Copy)]
pub enum ModuleRef<'a> {
    Adapter(&'a SparseExpertAdapter),
    Lora(&'a LoraModule),
}

impl<'a> ModuleRef<'a> {
    fn weights(self) -> (&'a SplitWeight, &'a SplitWeight) {
        match self {
            ModuleRef::Adapter(a) => (&a.w_down, &a.w_up),
            ModuleRef::Lora(l) => (&l.a, &l.b),
        }
    }

    /// Expert `k` on every split side of this module.
    pub fn pick_all(self, k: usize) -> ExpertPick {
        let (down, up) = self.weights();
        ExpertPick { down: down.experts.as_ref().map(|_| k), up: up.experts.as_ref().map(|_| k) }
    }

    pub fn split_weights(self) -> [&'a SplitWeight; 2] {
        let (d, u) = self.weights();
        [d, u]
    }
}

/// Modules attached to one transformer block.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerAdapters {
    /// Houlsby's post-attention adapter.
    pub attn: Option<SparseExpertAdapter>,
    /// The FFN adapter (parallel, Pfeiffer or Houlsby's second one).
    pub ffn: Option<SparseExpertAdapter>,
    pub lora_q: Option<LoraModule>,
    pub lora_v: Option<LoraModule>,
}

impl LayerAdapters {
    pub fn modules(&self) -> Vec<ModuleRef<'_>> {
        let mut v = vec![];
        v.extend(self.attn.as_ref().map(ModuleRef::Adapter));
        v.extend(self.ffn.as_ref().map(ModuleRef::Adapter));
        v.extend(self.lora_q.as_ref().map(ModuleRef::Lora));
        v.extend(self.lora_v.as_ref().map(ModuleRef::Lora));
        v
    }

    pub fn len(&self) -> usize {
        self.modules().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Every adapter module of a model, one [`LayerAdapters`] per block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub cfg: AdapterConfig,
    pub dim: usize,
    pub layers: Vec<LayerAdapters>,
    /// Set once experts were merged; forwards then always use dense weights.
    pub merged: bool,
}

fn kaiming_uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut Rng) -> Tensor {
    Tensor::uniform([rows, cols], (6.0 / fan_in as f64).sqrt(), rng)
}

impl AdapterSet {
    /// No modules at all (linear probing, bias tuning).
    pub fn empty(cfg: AdapterConfig, dim: usize, num_layers: usize) -> Self {
        AdapterSet { cfg, dim, layers: vec![LayerAdapters::default(); num_layers], merged: false }
    }

    /// Initialises adapters for a `dim`-wide, `num_layers`-deep backbone.
    ///
    /// Down-projections (LoRA `A`) are Kaiming-uniform with fan-in `dim`;
    /// up-projections, LoRA `B` and all biases start at zero. Weights come
    /// from the `INIT` sub-stream of `seed`, masks from the `MASKS` sub-stream
    /// forked once more per module and side.
    pub fn build(cfg: &AdapterConfig, dim: usize, num_layers: usize, seed: u64) -> Result<Self> {
        cfg.validate(dim)?;
        let Some(kind) = cfg.kind() else {
            return Ok(Self::empty(cfg.clone(), dim, num_layers));
        };
        let root = Rng::new(seed);
        let mut init = root.fork(streams::INIT);
        let mask_root = root.fork(streams::MASKS);
        let r = cfg.bottleneck_dim;
        let n = cfg.experts();
        let mut module = 0u64;

        let split = |name: String, rows: usize, cols: usize, t: Tensor, experts: bool, side: u64, m: u64| -> Result<SplitWeight> {
            let mut w = SplitWeight::dense(Param::new(name, t.with_grad(true)));
            let mut rng = mask_root.fork(2 * m + side);
            if experts {
                w.experts = Some(split_masks(rows, cols, n, &mut rng)?);
            } else if cfg.method.is_pruned() {
                w.retain = Some(RetainMask::random(rows, cols, cfg.retain_fraction, &mut rng)?);
            }
            Ok(w)
        };

        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let mut layer = LayerAdapters::default();
            match kind {
                AdapterKind::Adapter => {
                    let slots: &[&str] = match cfg.insertion {
                        Insertion::ParallelFfn | Insertion::Pfeiffer => &["ffn"],
                        Insertion::Houlsby => &["attn", "ffn"],
                    };
                    for slot in slots {
                        let p = format!("blocks.{l}.adapter_{slot}");
                        let wd = kaiming_uniform(dim, r, dim, &mut init);
                        let adapter = SparseExpertAdapter {
                            w_down: split(format!("{p}.w_down"), dim, r, wd, cfg.splits_down(), 0, module)?,
                            b_down: cfg
                                .use_bias
                                .then(|| Param::new(format!("{p}.b_down"), Tensor::zeros([r]).with_grad(true))),
                            w_up: split(format!("{p}.w_up"), r, dim, Tensor::zeros([r, dim]), cfg.splits_up(), 1, module)?,
                            b_up: cfg
                                .use_bias
                                .then(|| Param::new(format!("{p}.b_up"), Tensor::zeros([dim]).with_grad(true))),
                            activation: cfg.activation,
                            scale: cfg.scale,
                        };
                        module += 1;
                        if *slot == "attn" {
                            layer.attn = Some(adapter);
                        } else {
                            layer.ffn = Some(adapter);
                        }
                    }
                }
                AdapterKind::Lora => {
                    for target in [LoraTarget::Query, LoraTarget::Value] {
                        let p = match target {
                            LoraTarget::Query => format!("blocks.{l}.lora_q"),
                            LoraTarget::Value => format!("blocks.{l}.lora_v"),
                        };
                        let a = kaiming_uniform(dim, r, dim, &mut init);
                        let lora = LoraModule {
                            a: split(format!("{p}.a"), dim, r, a, false, 0, module)?,
                            b: split(format!("{p}.b"), r, dim, Tensor::zeros([r, dim]), cfg.splits_up(), 1, module)?,
                            target,
                            scale: cfg.scale,
                        };
                        module += 1;
                        match target {
                            LoraTarget::Query => layer.lora_q = Some(lora),
                            LoraTarget::Value => layer.lora_v = Some(lora),
                        }
                    }
                }
            }
            layers.push(layer);
        }
        Ok(AdapterSet { cfg: cfg.clone(), dim, layers, merged: false })
    }

    pub fn modules(&self) -> Vec<ModuleRef<'_>> {
        self.layers.iter().flat_map(LayerAdapters::modules).collect()
    }

    pub fn num_modules(&self) -> usize {
        self.layers.iter().map(LayerAdapters::len).sum()
    }

    /// Experts per split weight (1 when nothing is split).
    pub fn num_experts(&self) -> usize {
        self.modules()
            .iter()
            .flat_map(|m| m.split_weights())
            .map(SplitWeight::num_experts)
            .max()
            .unwrap_or(1)
    }

    pub fn has_experts(&self) -> bool {
        self.modules().iter().flat_map(|m| m.split_weights()).any(|w| w.experts.is_some())
    }

    pub fn split_weights(&self) -> Vec<&SplitWeight> {
        let mut v = vec![];
        for layer in &self.layers {
            for a in layer.attn.iter().chain(layer.ffn.iter()) {
                v.extend([&a.w_down, &a.w_up]);
            }
            for l in layer.lora_q.iter().chain(layer.lora_v.iter()) {
                v.extend([&l.a, &l.b]);
            }
        }
        v
    }

    pub fn split_weights_mut(&mut self) -> Vec<&mut SplitWeight> {
        let mut v = vec![];
        for layer in &mut self.layers {
            for a in layer.attn.iter_mut().chain(layer.ffn.iter_mut()) {
                v.push(&mut a.w_down);
                v.push(&mut a.w_up);
            }
            for l in layer.lora_q.iter_mut().chain(layer.lora_v.iter_mut()) {
                v.push(&mut l.a);
                v.push(&mut l.b);
            }
        }
        v
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = vec![];
        for layer in &self.layers {
            for a in layer.attn.iter().chain(layer.ffn.iter()) {
                v.extend(a.params());
            }
            for l in layer.lora_q.iter().chain(layer.lora_v.iter()) {
                v.extend(l.params());
            }
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![];
        for layer in &mut self.layers {
            for a in layer.attn.iter_mut().chain(layer.ffn.iter_mut()) {
                v.extend(a.params_mut());
            }
            for l in layer.lora_q.iter_mut().chain(layer.lora_v.iter_mut()) {
                v.extend(l.params_mut());
            }
        }
        v
    }

    /// Gradient masks aligned with [`AdapterSet::params`] after forwards
    /// routed by each entry of `passes`.
    pub fn grad_masks(&self, passes: &[&Routing]) -> Vec<GradMask> {
        let mut out = vec![];
        let mut module = 0;
        let collect = |module: usize| {
            let mut dense = false;
            let (mut downs, mut ups) = (vec![], vec![]);
            for p in passes {
                match p.pick(module) {
                    None => dense = true,
                    Some(pick) => {
                        downs.extend(pick.down);
                        ups.extend(pick.up);
                    }
                }
            }
            (dense, downs, ups)
        };
        for layer in &self.layers {
            for a in layer.attn.iter().chain(layer.ffn.iter()) {
                let (dense, downs, ups) = collect(module);
                out.extend(a.grad_masks(dense, &downs, &ups));
                module += 1;
            }
            for l in layer.lora_q.iter().chain(layer.lora_v.iter()) {
                let (dense, downs, ups) = collect(module);
                out.push(l.a.grad_mask(dense, &downs));
                out.push(l.b.grad_mask(dense, &ups));
                module += 1;
            }
        }
        out
    }

    /// Trainable adapter entries: full shared weights for mixtures, retained
    /// entries for pruned baselines, plus biases.
    pub fn trainable_count(&self) -> usize {
        self.layers
            .iter()
            .map(|layer| {
                layer.attn.iter().chain(layer.ffn.iter()).map(SparseExpertAdapter::trainable_count).sum::<usize>()
                    + layer.lora_q.iter().chain(layer.lora_v.iter()).map(LoraModule::trainable_count).sum::<usize>()
            })
            .sum()
    }

    /// Stored floats, regardless of masks.
    pub fn storage_count(&self) -> usize {
        self.params().iter().map(|p| p.tensor.numel()).sum()
    }

    pub(crate) fn module_pick<'r>(routing: &'r Routing, module: usize) -> Option<&'r ExpertPick> {
        routing.pick(module)
    }

    pub fn policy(&self) -> ExpertPolicy {
        self.cfg.expert_policy
    }
}
