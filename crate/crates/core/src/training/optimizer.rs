use std::collections::BTreeMap;

use crate::adapters::GradMask;
use crate::error::{MosaError, Result};
use crate::tensor::Param;

use super::TrainPlan;

/// AdamW hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn from_plan(plan: &TrainPlan) -> Self {
        AdamW { beta1: plan.betas.0, beta2: plan.betas.1, eps: plan.eps, weight_decay: plan.weight_decay }
    }
}

/// First and second moments of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    /// Number of optimizer steps taken so far.
    pub step: u64,
    /// Moments keyed by parameter name.
    pub moments: BTreeMap<String, Moments>,
}

/// One parameter's share of an optimizer step.
pub struct MaskedUpdate<'a> {
    pub param: &'a mut Param,
    pub grad: &'a [f64],
    pub mask: &'a GradMask,
}

/// One AdamW step restricted to each parameter's active entries.
///
/// Inactive entries are skipped entirely: their value, first moment and
/// second moment stay bit-identical. All gradients are checked before any
/// parameter is touched, so a failed step leaves everything unchanged.
pub fn masked_step(updates: &mut [MaskedUpdate<'_>], state: &mut OptimizerState, lr: f64, hp: &AdamW) -> Result<()> {
    for u in updates.iter() {
        let n = u.param.tensor.numel();
        if u.grad.len() != n {
            return Err(MosaError::Internal(format!(
                "gradient for {} has {} entries, parameter has {n}",
                u.param.name,
                u.grad.len()
            )));
        }
        if let GradMask::Entries(bits) = u.mask {
            if bits.len() != n {
                return Err(MosaError::Internal(format!("gradient mask for {} has wrong length", u.param.name)));
            }
        }
        if let Some(i) = u.grad.iter().position(|g| !g.is_finite()) {
            return Err(MosaError::numeric(
                "masked_step",
                format!("non-finite gradient for {} at entry {i}", u.param.name),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    let decay = 1.0 - lr * hp.weight_decay;
    for u in updates.iter_mut() {
        let n = u.param.tensor.numel();
        let mom = state
            .moments
            .entry(u.param.name.clone())
            .or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n] });
        let p = u.param.tensor.data_mut();
        for e in 0..n {
            if !u.mask.is_active(e) {
                continue;
            }
            let g = u.grad[e];
            p[e] *= decay;
            mom.m[e] = hp.beta1 * mom.m[e] + (1.0 - hp.beta1) * g;
            mom.v[e] = hp.beta2 * mom.v[e] + (1.0 - hp.beta2) * g * g;
            let m_hat = mom.m[e] / bc1;
            let v_hat = mom.v[e] / bc2;
            p[e] -= lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn hp() -> AdamW {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Param::new("w", Tensor::new([3], vec![1.0, 1.0, 1.0]).unwrap().with_grad(true));
        let mut st = OptimizerState::default();
        let g = [0.5, -2.0, 0.0];
        masked_step(&mut [MaskedUpdate { param: &mut p, grad: &g, mask: &GradMask::All }], &mut st, 0.1, &hp())
            .unwrap();
        let d = p.tensor.data();
        assert!((d[0] - 0.9).abs() < 1e-6);
        assert!((d[1] - 1.1).abs() < 1e-6);
        assert_eq!(d[2], 1.0);
    }

    #[test]
    fn inactive_entries_are_untouched() {
        let mut p = Param::new("w", Tensor::new([2], vec![0.3, 0.7]).unwrap().with_grad(true));
        let mut st = OptimizerState::default();
        let mask = GradMask::Entries(vec![true, false]);
        let wd = AdamW { weight_decay: 0.5, ..hp() };
        for _ in 0..5 {
            masked_step(&mut [MaskedUpdate { param: &mut p, grad: &[1.0, 1.0], mask: &mask }], &mut st, 0.01, &wd)
                .unwrap();
        }
        assert_eq!(p.tensor.data()[1].to_bits(), 0.7f64.to_bits());
        assert_eq!(st.moments["w"].m[1], 0.0);
        assert_ne!(p.tensor.data()[0], 0.3);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn non_finite_gradient_aborts_without_changes() {
        let mut p = Param::new("w", Tensor::new([2], vec![0.3, 0.7]).unwrap().with_grad(true));
        let before = p.clone();
        let mut st = OptimizerState::default();
        let r = masked_step(
            &mut [MaskedUpdate { param: &mut p, grad: &[1.0, f64::NAN], mask: &GradMask::All }],
            &mut st,
            0.1,
            &hp(),
        );
        assert!(matches!(r, Err(MosaError::Numeric { .. })));
        assert_eq!(p, before);
        assert_eq!(st.step, 0);
    }
}
