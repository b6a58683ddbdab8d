use std::fmt;
use std::str::FromStr;

use crate::error::{MosaError, Result};

/// Fine-tuning method. Everything except the two probes trains some kind of
/// adapter module next to the frozen backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Classifier head only.
    LinearProbe,
    /// Classifier head plus every bias of the backbone.
    BiasTuning,
    /// Dense bottleneck adapter.
    Adapter,
    /// Adapter pruned once before tuning.
    SparseAdapter,
    /// Mixture of sparse adapter experts.
    Mosa,
    Lora,
    SparseLora,
    /// Mixture of sparse LoRA experts.
    Mosl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterKind {
    Adapter,
    Lora,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Insertion {
    /// Parallel to the FFN, both reading the post-attention residual stream.
    ParallelFfn,
    /// Sequential, after the FFN residual add.
    Pfeiffer,
    /// Sequential, after the attention residual add and after the FFN residual add.
    Houlsby,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

/// How the down- and up-projection experts are drawn when both are split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpertPolicy {
    Independent,
    Tied,
}

macro_rules! text_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $text),+ })
            }
        }

        impl FromStr for $ty {
            type Err = MosaError;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    other => Err(MosaError::Config(format!(
                        concat!("unknown ", stringify!($ty), " '{}' (expected one of: {})"),
                        other,
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

text_enum!(Method {
    LinearProbe => "linear_probe",
    BiasTuning => "bias_tuning",
    Adapter => "adapter",
    SparseAdapter => "sparse_adapter",
    Mosa => "mosa",
    Lora => "lora",
    SparseLora => "sparse_lora",
    Mosl => "mosl",
});
text_enum!(Insertion { ParallelFfn => "parallel_ffn", Pfeiffer => "pfeiffer", Houlsby => "houlsby" });
text_enum!(Activation { Relu => "relu", Gelu => "gelu" });
text_enum!(ExpertPolicy { Independent => "independent", Tied => "tied" });

impl Method {
    pub fn kind(self) -> Option<AdapterKind> {
        match self {
            Method::LinearProbe | Method::BiasTuning => None,
            Method::Adapter | Method::SparseAdapter | Method::Mosa => Some(AdapterKind::Adapter),
            Method::Lora | Method::SparseLora | Method::Mosl => Some(AdapterKind::Lora),
        }
    }

    pub fn is_mixture(self) -> bool {
        matches!(self, Method::Mosa | Method::Mosl)
    }

    pub fn is_pruned(self) -> bool {
        matches!(self, Method::SparseAdapter | Method::SparseLora)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterConfig {
    pub method: Method,
    /// Bottleneck width `r` (LoRA rank for the LoRA family).
    pub bottleneck_dim: usize,
    pub num_experts: usize,
    /// Dense down-projection, split up-projection.
    pub hierarchical: bool,
    pub sparsify_down: bool,
    pub sparsify_up: bool,
    pub insertion: Insertion,
    pub activation: Activation,
    pub scale: f64,
    pub use_bias: bool,
    /// Fraction of entries kept by the pruned baselines.
    pub retain_fraction: f64,
    pub expert_policy: ExpertPolicy,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            method: Method::Mosa,
            bottleneck_dim: 8,
            num_experts: 4,
            hierarchical: true,
            sparsify_down: false,
            sparsify_up: true,
            insertion: Insertion::ParallelFfn,
            activation: Activation::Relu,
            scale: 1.0,
            use_bias: true,
            retain_fraction: 0.25,
            expert_policy: ExpertPolicy::Independent,
        }
    }
}

impl AdapterConfig {
    /// Standard dense adapter with the given bottleneck.
    pub fn standard(bottleneck_dim: usize) -> Self {
        AdapterConfig {
            method: Method::Adapter,
            bottleneck_dim,
            num_experts: 1,
            hierarchical: false,
            sparsify_down: false,
            sparsify_up: false,
            ..Default::default()
        }
    }

    pub fn mosa(bottleneck_dim: usize, num_experts: usize) -> Self {
        AdapterConfig { bottleneck_dim, num_experts, ..Default::default() }
    }

    pub fn kind(&self) -> Option<AdapterKind> {
        self.method.kind()
    }

    /// Experts actually materialised: `num_experts` for mixtures, 1 otherwise.
    pub fn experts(&self) -> usize {
        if self.method.is_mixture() {
            self.num_experts
        } else {
            1
        }
    }

    /// Whether the down-projection (LoRA `A`) is split into experts.
    pub fn splits_down(&self) -> bool {
        self.method == Method::Mosa && self.sparsify_down
    }

    /// Whether the up-projection (LoRA `B`) is split into experts.
    pub fn splits_up(&self) -> bool {
        match self.method {
            Method::Mosa => self.sparsify_up,
            Method::Mosl => true,
            _ => false,
        }
    }

    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        if self.kind().is_none() {
            return Ok(());
        }
        let r = self.bottleneck_dim;
        if r == 0 {
            return Err(MosaError::Config("bottleneck_dim must be at least 1".into()));
        }
        if self.num_experts == 0 || self.num_experts > embed_dim * r {
            return Err(MosaError::Config(format!(
                "num_experts = {} must lie in 1..={} (d·r)",
                self.num_experts,
                embed_dim * r
            )));
        }
        if self.hierarchical && (self.sparsify_down || !self.sparsify_up) {
            return Err(MosaError::Config(
                "hierarchical requires sparsify_down = false and sparsify_up = true".into(),
            ));
        }
        if self.method.is_pruned() && !(self.retain_fraction > 0.0 && self.retain_fraction <= 1.0) {
            return Err(MosaError::Config(format!(
                "retain_fraction = {} must lie in (0, 1]",
                self.retain_fraction
            )));
        }
        if !self.scale.is_finite() {
            return Err(MosaError::Config("scale must be finite".into()));
        }
        Ok(())
    }
}
