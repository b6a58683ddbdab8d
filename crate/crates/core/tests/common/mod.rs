#![allow(dead_code)]

pub mod grad;
pub mod train;

use mosa::adapters::{AdapterConfig, AdapterSet};
use mosa::backbone::{build_backbone, BackboneConfig, FrozenModel};
use mosa::data::{gen_synthetic, set_trainable_flags, Dataset, SyntheticSpec};
use mosa::rng::Rng;
use mosa::tensor::Tensor;

/// An 8x8 image, 4x4 patch, width-8 encoder: fast enough for exhaustive checks.
pub fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        mlp_ratio: 2.0,
        num_classes: 4,
        use_cls_token: true,
    }
}

pub fn small_backbone() -> BackboneConfig {
    BackboneConfig { embed_dim: 16, num_layers: 4, num_heads: 2, ..Default::default() }
}

pub fn model_and_adapters(bcfg: &BackboneConfig, acfg: &AdapterConfig, seed: u64) -> (FrozenModel, AdapterSet) {
    let mut model = build_backbone(bcfg, &mut Rng::new(seed)).unwrap();
    set_trainable_flags(&mut model, acfg.method);
    let adapters = AdapterSet::build(acfg, bcfg.embed_dim, bcfg.num_layers, seed).unwrap();
    (model, adapters)
}

/// Overwrites every adapter parameter with small random values so that
/// up-projections and biases are not trivially zero.
pub fn randomize_adapters(adapters: &mut AdapterSet, seed: u64) {
    let mut rng = Rng::new(seed ^ 0xA5A5);
    for p in adapters.params_mut() {
        for v in p.tensor.data_mut() {
            *v = 0.5 * rng.normal();
        }
    }
}

pub fn synthetic(classes: usize, per_class: usize, image_size: usize, seed: u64) -> (Dataset, Dataset) {
    gen_synthetic(&SyntheticSpec {
        num_classes: classes,
        train_per_class: per_class,
        val_per_class: per_class.div_ceil(2),
        image_size,
        seed,
        ..Default::default()
    })
    .unwrap()
}

pub fn random_images(b: usize, cfg: &BackboneConfig, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::randn([b, cfg.channels, cfg.image_size, cfg.image_size], 1.0, &mut rng)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
