//! Verifies reverse-mode gradients of an adapter-shaped computation against
//! central finite differences.
//!
//! `cargo run --example gradient_check -- [seed]`

use mosa::rng::Rng;
use mosa::tensor::{grad_check, Tape, Tensor, Var};

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(0);
    let mut rng = Rng::new(seed);
    let x = Tensor::randn([2, 3, 6], 1.0, &mut rng);
    let w_down = Tensor::randn([6, 2], 0.5, &mut rng);
    let w_up = Tensor::randn([2, 6], 0.5, &mut rng);
    let labels = [1usize, 4];

    // x + gelu(x W_down) W_up, mean-pooled over tokens, then cross-entropy
    // on the first five channels treated as logits.
    let f = |t: &mut Tape, v: &[Var]| {
        let h = t.matmul(v[0], v[1])?;
        let h = t.gelu(h)?;
        let o = t.matmul(h, v[2])?;
        let y = t.add(v[0], o)?;
        let pooled = t.pool(y, mosa::tensor::Pool::Mean)?;
        let sm = t.softmax(pooled)?;
        let logp = t.log(sm)?;
        let n = t.reshape(logp, &[2, 6])?;
        let mut picked = Tensor::full([2, 6], 0.0);
        for (row, &l) in labels.iter().enumerate() {
            picked.data_mut()[row * 6 + l] = -0.5;
        }
        let w = t.constant(&picked);
        let nll = t.mul(n, w)?;
        t.sum(nll)
    };
    let report = grad_check(f, &[x, w_down, w_up], 1e-5, 1e-4);
    println!(
        "checked {} entries: max rel error {:.2e} (tol {:.0e}) -> {}",
        report.entries_checked,
        report.max_rel_error,
        report.tol,
        if report.passed { "ok" } else { "FAILED" }
    );
    if let Some((p, e)) = report.worst {
        println!("worst entry: input {p}, index {e}");
    }
}
