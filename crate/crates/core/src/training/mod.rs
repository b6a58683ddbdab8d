//! Expert sampling, the consistency objective, masked AdamW, the learning
//! rate schedule and the training loop.

mod loss;
mod optimizer;
mod plan;
mod sampler;
mod schedule;
mod trainer;

pub use loss::{consistency_objective, LossTerms, PassOutputs};
pub use optimizer::{masked_step, AdamW, MaskedUpdate, Moments, OptimizerState};
pub use plan::{Alignment, Augment, ExpertSampling, TrainPlan};
pub use sampler::{draw_pair, sample_experts, sample_routing, sample_single};
pub use schedule::{lr_at, peak_lr};
pub use trainer::{
    metrics_csv, train, train_with_observer, EpochMetrics, StepInfo, StepObserver, TrainOutcome, METRICS_HEADER,
};
