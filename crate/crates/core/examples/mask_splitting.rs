//! Splits a small weight matrix into disjoint expert masks and prints who
//! owns each entry.
//!
//! `cargo run --example mask_splitting -- [rows] [cols] [experts] [seed]`

use mosa::adapters::split_masks;
use mosa::rng::Rng;

fn main() -> mosa::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().ok());
    let rows = args.next().flatten().unwrap_or(8);
    let cols = args.next().flatten().unwrap_or(6);
    let n = args.next().flatten().unwrap_or(3);
    let seed = args.next().flatten().unwrap_or(0) as u64;

    let masks = split_masks(rows, cols, n, &mut Rng::new(seed))?;
    masks.validate()?;
    println!("{rows}x{cols} split into {n} experts (seed {seed}); entry = owning expert");
    for r in 0..rows {
        let line: Vec<String> = (0..cols).map(|c| masks.owner(r * cols + c).to_string()).collect();
        println!("  {}", line.join(" "));
    }
    println!("entries per expert: {:?}", masks.counts());

    // Any subset of experts activates the union of their entries.
    let union = masks.union(&[0, n - 1]);
    println!("experts 0 and {} cover {} of {} entries", n - 1, union.iter().filter(|&&b| b).count(), rows * cols);
    Ok(())
}
