use crate::error::{MosaError, Result};
use crate::tensor::{Tape, Var};

/// Scalar values of each objective term for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub total: f64,
    /// Cross-entropy of the first pass.
    pub ce: f64,
    /// `KL(p1 || p2)`.
    pub kl_12: f64,
    /// `KL(p2 || p1)`.
    pub kl_21: f64,
    /// Sum of per-block feature MSEs.
    pub align_mse: f64,
}

impl LossTerms {
    /// The symmetric consistency term `(KL12 + KL21) / 2`.
    pub fn kl(&self) -> f64 {
        0.5 * (self.kl_12 + self.kl_21)
    }
}

/// One forward pass, as seen by the objective.
#[derive(Debug, Clone, Copy)]
pub struct PassOutputs<'a> {
    pub logits: Var,
    /// Block outputs aligned by the feature term.
    pub features: &'a [Var],
}

/// `CE(p1, y) + α/2 · (KL(p1‖p2) + KL(p2‖p1)) + β · Σ MSE(f1, f2)`.
///
/// Without a second pass the objective is the cross-entropy node itself, so
/// its gradient is bit-identical to plain supervised training.
pub fn consistency_objective(
    tape: &mut Tape,
    first: PassOutputs<'_>,
    second: Option<PassOutputs<'_>>,
    labels: &[usize],
    alpha: f64,
    beta: f64,
) -> Result<(Var, LossTerms)> {
    let ce = tape.cross_entropy(first.logits, labels)?;
    let mut terms = LossTerms { ce: tape.scalar(ce), ..Default::default() };
    let Some(second) = second else {
        terms.total = terms.ce;
        return Ok((ce, terms));
    };
    if first.features.len() != second.features.len() {
        return Err(MosaError::Dimension(format!(
            "passes expose {} and {} aligned feature maps",
            first.features.len(),
            second.features.len()
        )));
    }
    let mut total = ce;
    if alpha != 0.0 {
        let p1 = tape.softmax(first.logits)?;
        let p2 = tape.softmax(second.logits)?;
        let k12 = tape.kl_div(p1, p2)?;
        let k21 = tape.kl_div(p2, p1)?;
        terms.kl_12 = tape.scalar(k12);
        terms.kl_21 = tape.scalar(k21);
        let sym = tape.add(k12, k21)?;
        let sym = tape.scale(sym, 0.5 * alpha)?;
        total = tape.add(total, sym)?;
    }
    if beta != 0.0 && !first.features.is_empty() {
        let mut acc: Option<Var> = None;
        for (&f1, &f2) in first.features.iter().zip(second.features) {
            let m = tape.mse(f1, f2)?;
            acc = Some(match acc {
                None => m,
                Some(a) => tape.add(a, m)?,
            });
        }
        let acc = acc.expect("non-empty feature list");
        terms.align_mse = tape.scalar(acc);
        let weighted = tape.scale(acc, beta)?;
        total = tape.add(total, weighted)?;
    }
    terms.total = tape.scalar(total);
    if !terms.total.is_finite() {
        return Err(MosaError::numeric("consistency_objective", "non-finite loss"));
    }
    Ok((total, terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn logits_of(tape: &mut Tape, probs: &[f64]) -> Var {
        let t = Tensor::new([1, probs.len()], probs.iter().map(|p| p.ln()).collect()).unwrap();
        tape.leaf(&t)
    }

    #[test]
    fn hand_computed_two_class_value() {
        let mut tape = Tape::new();
        let l1 = logits_of(&mut tape, &[0.5, 0.5]);
        let l2 = logits_of(&mut tape, &[0.25, 0.75]);
        let (_, t) = consistency_objective(
            &mut tape,
            PassOutputs { logits: l1, features: &[] },
            Some(PassOutputs { logits: l2, features: &[] }),
            &[0],
            1.0,
            0.0,
        )
        .unwrap();
        // Independent arithmetic: ln 2 + ½(0.143841 + 0.130812).
        let kl12 = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        let kl21 = 0.25 * (0.25f64 / 0.5).ln() + 0.75 * (0.75f64 / 0.5).ln();
        let expected = 2f64.ln() + 0.5 * (kl12 + kl21);
        assert!((t.total - expected).abs() < 1e-12);
        assert!((t.total - 0.830474).abs() < 1e-6);
    }

    #[test]
    fn identical_passes_add_nothing() {
        let mut tape = Tape::new();
        let l1 = logits_of(&mut tape, &[0.2, 0.3, 0.5]);
        let l2 = logits_of(&mut tape, &[0.2, 0.3, 0.5]);
        let f = tape.leaf(&Tensor::full([2, 3], 1.5));
        let g = tape.leaf(&Tensor::full([2, 3], 1.5));
        let (_, t) = consistency_objective(
            &mut tape,
            PassOutputs { logits: l1, features: &[f] },
            Some(PassOutputs { logits: l2, features: &[g] }),
            &[2],
            3.0,
            2.0,
        )
        .unwrap();
        assert!((t.total - t.ce).abs() < 1e-12);
        assert_eq!(t.align_mse, 0.0);
    }

    #[test]
    fn no_second_pass_returns_the_ce_node() {
        let mut tape = Tape::new();
        let l1 = logits_of(&mut tape, &[0.9, 0.1]);
        let (v, t) =
            consistency_objective(&mut tape, PassOutputs { logits: l1, features: &[] }, None, &[1], 0.0, 0.0)
                .unwrap();
        assert_eq!(t.total, t.ce);
        assert_eq!(tape.scalar(v), t.ce);
    }
}
