use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::error::{MosaError, Result};

/// Which blocks' features the alignment term compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alignment {
    None,
    /// Blocks `0..floor(L/2)`.
    Shallow,
    /// Blocks `floor(L/2)..L`.
    Deep,
    All,
}

impl Alignment {
    /// Zero-based block indices aligned for an `L`-block model.
    pub fn blocks(self, num_layers: usize) -> Range<usize> {
        let half = num_layers / 2;
        match self {
            Alignment::None => 0..0,
            Alignment::Shallow => 0..half,
            Alignment::Deep => half..num_layers,
            Alignment::All => 0..num_layers,
        }
    }
}

impl fmt::Display for Alignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Alignment::None => "none",
            Alignment::Shallow => "shallow",
            Alignment::Deep => "deep",
            Alignment::All => "all",
        })
    }
}

impl FromStr for Alignment {
    type Err = MosaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Alignment::None),
            "shallow" => Ok(Alignment::Shallow),
            "deep" => Ok(Alignment::Deep),
            "all" => Ok(Alignment::All),
            _ => Err(MosaError::Config(format!(
                "unknown alignment '{s}' (expected none, shallow, deep, all)"
            ))),
        }
    }
}

/// Granularity at which experts are re-drawn. Only per-batch is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExpertSampling {
    #[default]
    PerBatch,
}

/// Seeded training-time augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Augment {
    pub crop: bool,
    pub flip: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Weight of the symmetric KL consistency term.
    pub alpha: f64,
    /// Weight of the feature alignment term.
    pub beta: f64,
    pub alignment: Alignment,
    pub expert_sampling: ExpertSampling,
    /// Force the two stochastic passes onto different up-projection experts.
    pub two_pass_distinct: bool,
    pub seed: u64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub augment: Augment,
    pub eval_batch_size: usize,
    /// Emit one metrics row per optimizer step as well as per epoch.
    pub log_steps: bool,
}

impl Default for TrainPlan {
    /// Desk-scale preset: the long-run schedule shape at 30 epochs.
    fn default() -> Self {
        TrainPlan {
            epochs: 30,
            warmup_epochs: 3,
            batch_size: 32,
            base_lr: 0.01,
            weight_decay: 0.0,
            alpha: 1.0,
            beta: 1.0,
            alignment: Alignment::Shallow,
            expert_sampling: ExpertSampling::PerBatch,
            two_pass_distinct: false,
            seed: 0,
            betas: (0.9, 0.999),
            eps: 1e-8,
            augment: Augment::default(),
            eval_batch_size: 128,
            log_steps: false,
        }
    }
}

impl TrainPlan {
    /// The full-length protocol: 100 epochs, 10 warmup, batch 128, AdamW.
    pub fn full_schedule() -> Self {
        TrainPlan {
            epochs: 100,
            warmup_epochs: 10,
            batch_size: 128,
            base_lr: 0.001,
            weight_decay: 0.01,
            ..Default::default()
        }
    }

    /// Whether a second stochastic pass contributes to the loss.
    pub fn needs_second_pass(&self) -> bool {
        self.alpha != 0.0 || self.beta != 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(MosaError::Config(m));
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return fail(format!(
                "warmup_epochs ({}) must be smaller than epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.epochs == 0 && self.warmup_epochs != 0 {
            return fail("warmup_epochs must be 0 when epochs is 0".into());
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return fail("batch sizes must be at least 1".into());
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return fail(format!("alpha ({}) and beta ({}) must be non-negative", self.alpha, self.beta));
        }
        if !(self.base_lr >= 0.0 && self.weight_decay >= 0.0 && self.eps > 0.0) {
            return fail("base_lr, weight_decay must be non-negative and eps positive".into());
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return fail(format!("betas ({b1}, {b2}) must lie in [0, 1)"));
        }
        Ok(())
    }
}
