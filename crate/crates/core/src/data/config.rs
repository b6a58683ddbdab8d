use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;

use crate::adapters::AdapterConfig;
use crate::backbone::BackboneConfig;
use crate::error::{MosaError, Result};
use crate::merge::InferenceMode;
use crate::training::{Alignment, Augment, ExpertSampling, TrainPlan};

/// Every accepted key with its default. An empty default means "unset".
const DEFAULTS: &[(&str, &str)] = &[
    // backbone
    ("image_size", "16"),
    ("patch_size", "4"),
    ("channels", "3"),
    ("embed_dim", "64"),
    ("num_layers", "4"),
    ("num_heads", "4"),
    ("mlp_ratio", "4"),
    ("num_classes", "10"),
    ("use_cls_token", "true"),
    ("backbone_seed", "0"),
    // adapters
    ("method", "mosa"),
    ("bottleneck_dim", "8"),
    ("num_experts", "4"),
    ("hierarchical", "true"),
    ("sparsify_down", "auto"),
    ("sparsify_up", "true"),
    ("insertion", "parallel_ffn"),
    ("activation", "relu"),
    ("scale", "1"),
    ("use_bias", "true"),
    ("retain_fraction", "0.25"),
    ("expert_policy", "independent"),
    // training
    ("epochs", "30"),
    ("warmup_epochs", "3"),
    ("batch_size", "32"),
    ("base_lr", "0.01"),
    ("weight_decay", "0"),
    ("alpha", "1"),
    ("beta", "1"),
    ("alignment", "shallow"),
    ("expert_sampling", "per_batch"),
    ("two_pass_distinct", "false"),
    ("seed", "0"),
    ("beta1", "0.9"),
    ("beta2", "0.999"),
    ("eps", "1e-8"),
    ("augment_crop", "false"),
    ("augment_flip", "false"),
    ("eval_batch_size", "128"),
    ("log_steps", "false"),
    // evaluation
    ("eval_mode", "merge"),
    ("fixed_index", "0"),
    // paths
    ("train_data", ""),
    ("val_data", ""),
    ("out_dir", ""),
];

/// Whether `key` is a recognised config key.
pub fn is_known_key(key: &str) -> bool {
    DEFAULTS.iter().any(|(k, _)| *k == key)
}

/// Everything needed to reproduce a run, parsed from flat `key=value` text.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub backbone_seed: u64,
    pub adapter: AdapterConfig,
    pub plan: TrainPlan,
    pub eval_mode: InferenceMode,
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_map(&BTreeMap::new()).expect("defaults are valid").0
    }
}

fn get<T: FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T>
where
    T::Err: Display,
{
    let v = &map[key];
    v.parse::<T>().map_err(|e| MosaError::Config(format!("invalid value '{v}' for {key}: {e}")))
}

fn path(map: &BTreeMap<String, String>, key: &str) -> Option<PathBuf> {
    let v = &map[key];
    (!v.is_empty()).then(|| PathBuf::from(v))
}

/// Splits config text into key/value pairs. Blank lines and lines starting
/// with `#` are ignored; keys must be unique.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(MosaError::Config(format!("line {}: expected key=value, got '{line}'", no + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(MosaError::Config(format!("line {}: duplicate key {k}", no + 1)));
        }
    }
    Ok(map)
}

/// Parses a single `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| MosaError::Config(format!("override '{s}' is not key=value")))?;
    let k = k.trim();
    if !is_known_key(k) {
        return Err(MosaError::Config(format!("unknown config key '{k}'")));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let (cfg, notices) = RunConfig::from_map(&parse_pairs(text)?)?;
        for n in notices {
            info!("{n}");
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| MosaError::io(path, e))?;
        RunConfig::parse(&text)
    }

    /// Builds a config from explicit pairs, filling in defaults. Returns one
    /// notice per defaulted key.
    pub fn from_map(given: &BTreeMap<String, String>) -> Result<(RunConfig, Vec<String>)> {
        let unknown: Vec<&str> = given.keys().map(String::as_str).filter(|k| !is_known_key(k)).collect();
        if !unknown.is_empty() {
            return Err(MosaError::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        let mut map = given.clone();
        let mut notices = vec![];
        for (k, v) in DEFAULTS {
            if !map.contains_key(*k) {
                map.insert(k.to_string(), v.to_string());
                if !v.is_empty() {
                    notices.push(format!("config: {k} not set, using default {v}"));
                }
            }
        }

        let backbone = BackboneConfig {
            image_size: get(&map, "image_size")?,
            patch_size: get(&map, "patch_size")?,
            channels: get(&map, "channels")?,
            embed_dim: get(&map, "embed_dim")?,
            num_layers: get(&map, "num_layers")?,
            num_heads: get(&map, "num_heads")?,
            mlp_ratio: get(&map, "mlp_ratio")?,
            num_classes: get(&map, "num_classes")?,
            use_cls_token: get(&map, "use_cls_token")?,
        };
        let hierarchical: bool = get(&map, "hierarchical")?;
        let sparsify_down = match map["sparsify_down"].as_str() {
            "auto" => !hierarchical,
            _ => get(&map, "sparsify_down")?,
        };
        let adapter = AdapterConfig {
            method: get(&map, "method")?,
            bottleneck_dim: get(&map, "bottleneck_dim")?,
            num_experts: get(&map, "num_experts")?,
            hierarchical,
            sparsify_down,
            sparsify_up: get(&map, "sparsify_up")?,
            insertion: get(&map, "insertion")?,
            activation: get(&map, "activation")?,
            scale: get(&map, "scale")?,
            use_bias: get(&map, "use_bias")?,
            retain_fraction: get(&map, "retain_fraction")?,
            expert_policy: get(&map, "expert_policy")?,
        };
        if map["expert_sampling"] != "per_batch" {
            return Err(MosaError::Config(format!(
                "expert_sampling '{}' is not supported (only per_batch)",
                map["expert_sampling"]
            )));
        }
        let plan = TrainPlan {
            epochs: get(&map, "epochs")?,
            warmup_epochs: get(&map, "warmup_epochs")?,
            batch_size: get(&map, "batch_size")?,
            base_lr: get(&map, "base_lr")?,
            weight_decay: get(&map, "weight_decay")?,
            alpha: get(&map, "alpha")?,
            beta: get(&map, "beta")?,
            alignment: get::<Alignment>(&map, "alignment")?,
            expert_sampling: ExpertSampling::PerBatch,
            two_pass_distinct: get(&map, "two_pass_distinct")?,
            seed: get(&map, "seed")?,
            betas: (get(&map, "beta1")?, get(&map, "beta2")?),
            eps: get(&map, "eps")?,
            augment: Augment { crop: get(&map, "augment_crop")?, flip: get(&map, "augment_flip")? },
            eval_batch_size: get(&map, "eval_batch_size")?,
            log_steps: get(&map, "log_steps")?,
        };
        let eval_mode = InferenceMode::parse(&map["eval_mode"], get(&map, "fixed_index")?, plan.seed)?;
        let cfg = RunConfig {
            backbone,
            backbone_seed: get(&map, "backbone_seed")?,
            adapter,
            plan,
            eval_mode,
            train_data: path(&map, "train_data"),
            val_data: path(&map, "val_data"),
            out_dir: path(&map, "out_dir"),
        };
        cfg.validate()?;
        Ok((cfg, notices))
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.adapter.validate(self.backbone.embed_dim)?;
        self.plan.validate()
    }

    /// Fully resolved key/value pairs, every key present.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let b = &self.backbone;
        let a = &self.adapter;
        let p = &self.plan;
        let fixed_index = match self.eval_mode {
            InferenceMode::Fixed(k) => k,
            _ => 0,
        };
        let show = |o: &Option<PathBuf>| o.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let pairs: Vec<(&str, String)> = vec![
            ("image_size", b.image_size.to_string()),
            ("patch_size", b.patch_size.to_string()),
            ("channels", b.channels.to_string()),
            ("embed_dim", b.embed_dim.to_string()),
            ("num_layers", b.num_layers.to_string()),
            ("num_heads", b.num_heads.to_string()),
            ("mlp_ratio", b.mlp_ratio.to_string()),
            ("num_classes", b.num_classes.to_string()),
            ("use_cls_token", b.use_cls_token.to_string()),
            ("backbone_seed", self.backbone_seed.to_string()),
            ("method", a.method.to_string()),
            ("bottleneck_dim", a.bottleneck_dim.to_string()),
            ("num_experts", a.num_experts.to_string()),
            ("hierarchical", a.hierarchical.to_string()),
            ("sparsify_down", a.sparsify_down.to_string()),
            ("sparsify_up", a.sparsify_up.to_string()),
            ("insertion", a.insertion.to_string()),
            ("activation", a.activation.to_string()),
            ("scale", a.scale.to_string()),
            ("use_bias", a.use_bias.to_string()),
            ("retain_fraction", a.retain_fraction.to_string()),
            ("expert_policy", a.expert_policy.to_string()),
            ("epochs", p.epochs.to_string()),
            ("warmup_epochs", p.warmup_epochs.to_string()),
            ("batch_size", p.batch_size.to_string()),
            ("base_lr", p.base_lr.to_string()),
            ("weight_decay", p.weight_decay.to_string()),
            ("alpha", p.alpha.to_string()),
            ("beta", p.beta.to_string()),
            ("alignment", p.alignment.to_string()),
            ("expert_sampling", "per_batch".to_string()),
            ("two_pass_distinct", p.two_pass_distinct.to_string()),
            ("seed", p.seed.to_string()),
            ("beta1", p.betas.0.to_string()),
            ("beta2", p.betas.1.to_string()),
            ("eps", p.eps.to_string()),
            ("augment_crop", p.augment.crop.to_string()),
            ("augment_flip", p.augment.flip.to_string()),
            ("eval_batch_size", p.eval_batch_size.to_string()),
            ("log_steps", p.log_steps.to_string()),
            ("eval_mode", self.eval_mode.name().to_string()),
            ("fixed_index", fixed_index.to_string()),
            ("train_data", show(&self.train_data)),
            ("val_data", show(&self.val_data)),
            ("out_dir", show(&self.out_dir)),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Canonical text: every key, sorted, one `key=value` per line.
    pub fn to_text(&self) -> String {
        self.to_map().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// A copy with `key=value` pairs replaced.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut map = self.to_map();
        for (k, v) in overrides {
            if !is_known_key(k) {
                return Err(MosaError::Config(format!("unknown config key '{k}'")));
            }
            if k == "hierarchical" && !overrides.iter().any(|(k, _)| k == "sparsify_down") {
                map.insert("sparsify_down".into(), "auto".into());
            }
            map.insert(k.clone(), v.clone());
        }
        Ok(RunConfig::from_map(&map)?.0)
    }
}
