use super::TrainPlan;

/// Peak learning rate after the linear scaling rule `base_lr · b / 256`.
pub fn peak_lr(plan: &TrainPlan) -> f64 {
    plan.base_lr * plan.batch_size as f64 / 256.0
}

/// Learning rate for optimizer step `step` (0-based).
///
/// Linear ramp from 0 to the peak over the warmup epochs, then a half-cosine
/// down to 0 at step `epochs · steps_per_epoch`.
pub fn lr_at(step: usize, plan: &TrainPlan, steps_per_epoch: usize) -> f64 {
    let peak = peak_lr(plan);
    let warmup = plan.warmup_epochs * steps_per_epoch;
    let total = plan.epochs * steps_per_epoch;
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if step >= total {
        return 0.0;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
}
