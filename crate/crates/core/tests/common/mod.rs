#![allow(dead_code)]

pub mod gradcheck;
pub mod oracles;

use lodisc::data::{Dataset, SyntheticSpec};
use lodisc::heads::HeadConfig;
use lodisc::masking::MaskStrategy;
use lodisc::pipeline::{PretrainConfig, TrainConfig};
use lodisc::vit::VitConfig;

/// A 16×16 encoder with a 2×2 patch grid, small enough for many runs.
pub fn tiny_config(strategy: MaskStrategy, epochs: usize) -> PretrainConfig {
    PretrainConfig {
        vit: VitConfig {
            image_size: 16,
            patch_size: 8,
            embed_dim: 16,
            layers: 2,
            heads: 2,
            ..VitConfig::default()
        },
        heads: HeadConfig {
            hidden_dim: 32,
            out_dim: 16,
            ..HeadConfig::default()
        },
        train: TrainConfig {
            batch_size: 4,
            epochs,
            masking_ratio: 0.7,
            strategy,
            seed: 11,
            ..TrainConfig::default()
        },
        ..PretrainConfig::default()
    }
}

pub fn tiny_data(per_class: usize) -> Dataset {
    let mut d = SyntheticSpec {
        images_per_class: per_class,
        image_size: 16,
        ..SyntheticSpec::default()
    }
    .generate()
    .unwrap();
    d.normalize().unwrap();
    d
}
