//! Evaluates the two-pass consistency objective on hand-picked predictions
//! and shows how each weight changes the total.
//!
//! `cargo run --example consistency_loss`

use mosa::tensor::{Tape, Tensor};
use mosa::training::{consistency_objective, PassOutputs};

fn main() -> mosa::Result<()> {
    let p1 = [0.5, 0.5];
    let p2 = [0.25, 0.75];
    println!("p1 = {p1:?}, p2 = {p2:?}, label 0");
    for (alpha, beta) in [(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (1.0, 1.0)] {
        let mut tape = Tape::new();
        let logits = |tape: &mut Tape, p: [f64; 2]| tape.leaf(&Tensor::new([1, 2], p.iter().map(|v| v.ln()).collect()).unwrap().with_grad(true));
        let l1 = logits(&mut tape, p1);
        let l2 = logits(&mut tape, p2);
        // One aligned feature map per pass, differing by 0.1 everywhere.
        let f1 = tape.leaf(&Tensor::full([1, 3, 4], 0.0));
        let f2 = tape.leaf(&Tensor::full([1, 3, 4], 0.1));
        let (loss, t) = consistency_objective(
            &mut tape,
            PassOutputs { logits: l1, features: &[f1] },
            Some(PassOutputs { logits: l2, features: &[f2] }),
            &[0],
            alpha,
            beta,
        )?;
        tape.backward(loss)?;
        println!(
            "alpha {alpha} beta {beta}: total {:.6}  ce {:.6}  kl12 {:.6}  kl21 {:.6}  mse {:.4}",
            t.total, t.ce, t.kl_12, t.kl_21, t.align_mse
        );
        println!("    d total / d first-pass logits = {:?}", tape.grad(l1).unwrap_or(&[]));
    }
    Ok(())
}
