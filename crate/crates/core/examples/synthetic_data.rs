//! Generates the procedural image dataset, writes it in the binary dataset
//! format and prints per-class pixel statistics.
//!
//! `cargo run --example synthetic_data -- [difficulty] [seed]`

use mosa::data::{gen_synthetic, Dataset, SyntheticSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let difficulty: f64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(1.5);
    let seed: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);
    let spec = SyntheticSpec { difficulty, seed, train_per_class: 50, val_per_class: 10, ..Default::default() };
    let (train_set, val_set) = gen_synthetic(&spec)?;
    println!("train {} samples, val {} samples, image {}x{}x{}", train_set.len(), val_set.len(), spec.channels, spec.image_size, spec.image_size);

    let mut sums = vec![(0usize, 0.0f64, 0.0f64); spec.num_classes];
    for i in 0..train_set.len() {
        let label = train_set.labels[i];
        let img = train_set.image(i);
        let mean = img.iter().sum::<f64>() / img.len() as f64;
        let energy = img.iter().map(|v| v * v).sum::<f64>() / img.len() as f64;
        let s = &mut sums[label];
        s.0 += 1;
        s.1 += mean;
        s.2 += energy;
    }
    println!("class  count  mean pixel  mean square");
    for (c, (n, m, e)) in sums.iter().enumerate() {
        println!("{c:>5}  {n:>5}  {:>10.4}  {:>11.4}", m / *n as f64, e / *n as f64);
    }

    let path = std::env::temp_dir().join("synthetic-train.mosa-data");
    train_set.save(&path)?;
    let back = Dataset::load(&path)?;
    println!("{} round trips: {}", path.display(), back == train_set);
    std::fs::remove_file(&path)?;
    Ok(())
}
