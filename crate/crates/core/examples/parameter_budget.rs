//! Trainable parameter counts (classifier head excluded) for every method
//! on a ViT-Base shaped encoder, and on a custom width/depth.
//!
//! `cargo run --example parameter_budget -- [embed_dim] [num_layers] [bottleneck]`

use mosa::adapters::{AdapterConfig, Method};
use mosa::backbone::BackboneConfig;
use mosa::merge::count_params_for_config;

fn main() -> mosa::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().ok());
    let d = args.next().flatten().unwrap_or(768);
    let layers = args.next().flatten().unwrap_or(12);
    let r = args.next().flatten().unwrap_or(64);
    let heads = if d % 12 == 0 { 12 } else { 1 };
    let bcfg = BackboneConfig { embed_dim: d, num_layers: layers, num_heads: heads, image_size: 224, patch_size: 16, ..Default::default() };

    println!("d={d} L={layers} r={r}");
    println!("{:<15} {:>3} {:>12}", "method", "N", "params");
    let methods = [
        (Method::LinearProbe, 1),
        (Method::BiasTuning, 1),
        (Method::Adapter, 1),
        (Method::SparseAdapter, 1),
        (Method::Mosa, 2),
        (Method::Mosa, 4),
        (Method::Mosa, 8),
        (Method::Lora, 1),
        (Method::SparseLora, 1),
        (Method::Mosl, 4),
    ];
    for (method, n) in methods {
        let acfg = AdapterConfig { method, num_experts: n, ..AdapterConfig::standard(r) };
        println!("{:<15} {n:>3} {:>12}", method.to_string(), count_params_for_config(&bcfg, &acfg)?);
    }
    Ok(())
}
