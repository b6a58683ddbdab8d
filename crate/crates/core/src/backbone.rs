//! A tiny ViT-style encoder used as the frozen feature extractor.
//!
//! Blocks are pre-norm: `h = x + Attn(LN(x))`, `y = h + MLP(LN(h))`. The
//! feature tap of block `i` is `y`, the output after the second residual add.
//! Adapters attach at the insertion points described on [`Insertion`].

use crate::adapters::{AdapterSet, Insertion, LayerAdapters, Routing};
use crate::error::{MosaError, Result};
use crate::rng::Rng;
use crate::tensor::{Param, Pool, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    pub use_cls_token: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_size: 16,
            patch_size: 4,
            channels: 3,
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            mlp_ratio: 4.0,
            num_classes: 10,
            use_cls_token: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(MosaError::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_heads == 0 || self.embed_dim == 0 || self.embed_dim % self.num_heads != 0 {
            return fail(format!(
                "embed_dim {} must be divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_layers < 2 {
            return fail(format!("num_layers must be at least 2, got {}", self.num_layers));
        }
        if self.channels == 0 {
            return fail("channels must be positive".into());
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_dim() == 0 {
            return fail(format!("mlp_ratio {} gives an empty MLP", self.mlp_ratio));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn num_tokens(&self) -> usize {
        self.num_patches() + usize::from(self.use_cls_token)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn mlp_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    fn init(name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        Linear {
            w: Param::new(format!("{name}.w"), Tensor::randn([fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), rng)),
            b: Param::new(format!("{name}.b"), Tensor::randn([fan_out], 0.02, rng)),
        }
    }

    fn zeros(name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: Param::new(format!("{name}.w"), Tensor::zeros([fan_in, fan_out])),
            b: Param::new(format!("{name}.b"), Tensor::zeros([fan_out])),
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.bind(&self.w);
        let b = tape.bind(&self.b);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gamma: Param,
    pub beta: Param,
}

impl Norm {
    fn init(name: &str, d: usize) -> Self {
        Norm {
            gamma: Param::new(format!("{name}.g"), Tensor::full([d], 1.0)),
            beta: Param::new(format!("{name}.b"), Tensor::zeros([d])),
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.bind(&self.gamma);
        let b = tape.bind(&self.beta);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm1: Norm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Frozen encoder plus trainable classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenModel {
    pub cfg: BackboneConfig,
    pub patch_embed: Linear,
    pub cls_token: Option<Param>,
    pub pos_embed: Param,
    pub blocks: Vec<Block>,
    pub norm: Norm,
    pub head: Linear,
}

/// Result of one forward pass recorded on a tape.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[B, num_classes]`.
    pub logits: Var,
    /// One `[B, T, d]` tap per block.
    pub features: Vec<Var>,
    /// `[B, d]` pooled representation fed to the head.
    pub pooled: Var,
}

/// Randomly initialised stand-in for a pretrained encoder. Linear weights are
/// `N(0, 1/fan_in)`, biases, class token and positional embeddings
/// `N(0, 0.02²)`, norms identity. The head starts at zero. Everything except
/// the head is frozen.
pub fn build_backbone(cfg: &BackboneConfig, rng: &mut Rng) -> Result<FrozenModel> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let patch_embed = Linear::init("patch_embed", cfg.patch_dim(), d, rng);
    let cls_token = cfg
        .use_cls_token
        .then(|| Param::new("cls_token", Tensor::randn([d], 0.02, rng)));
    let pos_embed = Param::new("pos_embed", Tensor::randn([cfg.num_tokens(), d], 0.02, rng));
    let blocks = (0..cfg.num_layers)
        .map(|i| {
            let p = format!("blocks.{i}");
            Block {
                norm1: Norm::init(&format!("{p}.norm1"), d),
                qkv: Linear::init(&format!("{p}.attn.qkv"), d, 3 * d, rng),
                proj: Linear::init(&format!("{p}.attn.proj"), d, d, rng),
                norm2: Norm::init(&format!("{p}.norm2"), d),
                fc1: Linear::init(&format!("{p}.mlp.fc1"), d, cfg.mlp_dim(), rng),
                fc2: Linear::init(&format!("{p}.mlp.fc2"), cfg.mlp_dim(), d, rng),
            }
        })
        .collect();
    let mut model = FrozenModel {
        cfg: cfg.clone(),
        patch_embed,
        cls_token,
        pos_embed,
        blocks,
        norm: Norm::init("norm", d),
        head: Linear::zeros("head", d, cfg.num_classes),
    };
    model.freeze();
    Ok(model)
}

/// `[B, C, H, W]` images to `[B, P, C·p·p]` patch rows. Patches are taken in
/// row-major grid order; each row lists channel, then patch row, then column.
pub fn patchify(images: &Tensor, cfg: &BackboneConfig) -> Result<Tensor> {
    let s = images.shape();
    let (c, hw, p) = (cfg.channels, cfg.image_size, cfg.patch_size);
    if s.len() != 4 || s[1] != c || s[2] != hw || s[3] != hw {
        return Err(MosaError::Dimension(format!(
            "images {s:?} do not match [B, {c}, {hw}, {hw}]"
        )));
    }
    let b = s[0];
    let g = hw / p;
    let pd = cfg.patch_dim();
    let src = images.data();
    let mut out = vec![0.0; b * g * g * pd];
    for n in 0..b {
        for gy in 0..g {
            for gx in 0..g {
                let row = &mut out[((n * g + gy) * g + gx) * pd..][..pd];
                let mut k = 0;
                for ch in 0..c {
                    for py in 0..p {
                        let base = ((n * c + ch) * hw + gy * p + py) * hw + gx * p;
                        row[k..k + p].copy_from_slice(&src[base..base + p]);
                        k += p;
                    }
                }
            }
        }
    }
    Tensor::new([b, g * g, pd], out)
}

impl FrozenModel {
    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.backbone_params();
        v.push(&self.head.w);
        v.push(&self.head.b);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.collect_mut(true)
    }

    /// Everything except the classifier head.
    pub fn backbone_params(&self) -> Vec<&Param> {
        let mut v = vec![&self.patch_embed.w, &self.patch_embed.b];
        v.extend(self.cls_token.as_ref());
        v.push(&self.pos_embed);
        for b in &self.blocks {
            v.extend([
                &b.norm1.gamma, &b.norm1.beta, &b.qkv.w, &b.qkv.b, &b.proj.w, &b.proj.b,
                &b.norm2.gamma, &b.norm2.beta, &b.fc1.w, &b.fc1.b, &b.fc2.w, &b.fc2.b,
            ]);
        }
        v.extend([&self.norm.gamma, &self.norm.beta]);
        v
    }

    pub fn backbone_params_mut(&mut self) -> Vec<&mut Param> {
        self.collect_mut(false)
    }

    fn collect_mut(&mut self, with_head: bool) -> Vec<&mut Param> {
        let FrozenModel { patch_embed, cls_token, pos_embed, blocks, norm, head, .. } = self;
        let mut v = vec![&mut patch_embed.w, &mut patch_embed.b];
        v.extend(cls_token.as_mut());
        v.push(pos_embed);
        for b in blocks {
            v.extend([
                &mut b.norm1.gamma, &mut b.norm1.beta, &mut b.qkv.w, &mut b.qkv.b, &mut b.proj.w,
                &mut b.proj.b, &mut b.norm2.gamma, &mut b.norm2.beta, &mut b.fc1.w, &mut b.fc1.b,
                &mut b.fc2.w, &mut b.fc2.b,
            ]);
        }
        v.extend([&mut norm.gamma, &mut norm.beta]);
        if with_head {
            v.extend([&mut head.w, &mut head.b]);
        }
        v
    }

    /// Freezes the backbone and unfreezes the head.
    pub fn freeze(&mut self) {
        for p in self.backbone_params_mut() {
            p.set_trainable(false);
        }
        self.head.w.set_trainable(true);
        self.head.b.set_trainable(true);
    }

    /// Makes every backbone bias (linear biases and norm shifts) trainable.
    pub fn unfreeze_biases(&mut self) {
        for p in self.backbone_params_mut() {
            if p.name.ends_with(".b") {
                p.set_trainable(true);
            }
        }
    }

    /// Trainable backbone entries (zero unless biases were unfrozen).
    pub fn trainable_backbone_count(&self) -> usize {
        self.backbone_params().iter().filter(|p| p.trainable()).map(|p| p.tensor.numel()).sum()
    }

    /// Byte image of the backbone weights in a fixed order.
    pub fn backbone_bytes(&self) -> Vec<u8> {
        self.backbone_params().iter().flat_map(|p| p.tensor.to_le_bytes()).collect()
    }

    fn check_adapters(&self, adapters: &AdapterSet, routing: &Routing) -> Result<()> {
        if adapters.layers.is_empty() {
            return Ok(());
        }
        if adapters.dim != self.cfg.embed_dim || adapters.layers.len() != self.cfg.num_layers {
            return Err(MosaError::Config(format!(
                "adapters built for d = {}, L = {} but backbone has d = {}, L = {}",
                adapters.dim,
                adapters.layers.len(),
                self.cfg.embed_dim,
                self.cfg.num_layers
            )));
        }
        if let Routing::Experts(p) = routing {
            if p.len() != adapters.num_modules() {
                return Err(MosaError::Index(format!(
                    "routing has {} picks for {} modules",
                    p.len(),
                    adapters.num_modules()
                )));
            }
        }
        Ok(())
    }

    /// Forward pass for `[B, C, H, W]` images. `adapters = None` runs the
    /// bare backbone.
    pub fn forward(
        &self,
        tape: &mut Tape,
        images: &Tensor,
        adapters: Option<&AdapterSet>,
        routing: &Routing,
    ) -> Result<ForwardOutput> {
        let patches = patchify(images, &self.cfg)?;
        let px = tape.constant(&patches);
        self.forward_patches(tape, px, adapters, routing)
    }

    /// Forward pass from an already-recorded `[B, P, C·p·p]` patch tensor.
    pub fn forward_patches(
        &self,
        tape: &mut Tape,
        patches: Var,
        adapters: Option<&AdapterSet>,
        routing: &Routing,
    ) -> Result<ForwardOutput> {
        if let Some(a) = adapters {
            self.check_adapters(a, routing)?;
        }
        let dense = Routing::Dense;
        let routing = match adapters {
            Some(a) if a.merged => &dense,
            _ => routing,
        };
        let emb = self.patch_embed.apply(tape, patches)?;
        let cls = self.cls_token.as_ref().map(|c| tape.bind(c));
        let pos = tape.bind(&self.pos_embed);
        let mut x = tape.tokens(emb, cls, pos)?;

        let mut features = Vec::with_capacity(self.blocks.len());
        let mut module = 0;
        let d = self.cfg.embed_dim;
        for (i, block) in self.blocks.iter().enumerate() {
            let layer = adapters.and_then(|a| a.layers.get(i));
            // Module order within a layer: attn, ffn, lora_q, lora_v.
            let (attn_adapter, ffn_adapter) = match layer {
                Some(l) => (l.attn.as_ref(), l.ffn.as_ref()),
                None => (None, None),
            };
            let base = module;
            let attn_pick = AdapterSet::module_pick(routing, base);
            let ffn_pick = AdapterSet::module_pick(routing, base + usize::from(attn_adapter.is_some()));
            let mut lora_idx = base + usize::from(attn_adapter.is_some()) + usize::from(ffn_adapter.is_some());
            module += layer.map_or(0, LayerAdapters::len);

            let h1 = block.norm1.apply(tape, x)?;
            let mut qkv = block.qkv.apply(tape, h1)?;
            if let Some(layer) = layer {
                for lora in layer.lora_q.iter().chain(layer.lora_v.iter()) {
                    let pick = AdapterSet::module_pick(routing, lora_idx);
                    lora_idx += 1;
                    let delta = lora.delta(tape, h1, pick.and_then(|p| p.up))?;
                    qkv = tape.add_cols(qkv, delta, lora.target.column_offset(d))?;
                }
            }
            let att = tape.attention(qkv, self.cfg.num_heads)?;
            let att = block.proj.apply(tape, att)?;
            let mut h = tape.add(x, att)?;

            if let Some(a) = attn_adapter {
                let delta = a.delta(tape, h, attn_pick)?;
                h = tape.add(h, delta)?;
            }
            let m = block.norm2.apply(tape, h)?;
            let m = block.fc1.apply(tape, m)?;
            let m = tape.gelu(m)?;
            let m = block.fc2.apply(tape, m)?;
            let insertion = adapters.map(|a| a.cfg.insertion);
            let y = match (ffn_adapter, insertion) {
                (Some(a), Some(Insertion::ParallelFfn)) => {
                    let delta = a.delta(tape, h, ffn_pick)?;
                    let y = tape.add(h, m)?;
                    tape.add(y, delta)?
                }
                (Some(a), _) => {
                    let y = tape.add(h, m)?;
                    let delta = a.delta(tape, y, ffn_pick)?;
                    tape.add(y, delta)?
                }
                (None, _) => tape.add(h, m)?,
            };
            features.push(y);
            x = y;
        }

        let x = self.norm.apply(tape, x)?;
        let pooled = tape.pool(x, if self.cfg.use_cls_token { Pool::Cls } else { Pool::Mean })?;
        let logits = self.head.apply(tape, pooled)?;
        Ok(ForwardOutput { logits, features, pooled })
    }
}
