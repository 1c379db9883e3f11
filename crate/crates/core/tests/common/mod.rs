#![allow(dead_code)]

use spaceedit::editops::{synthesize_dataset, BaseSource, ImagePair};
use spaceedit::generator::{GeneratorBundle, GeneratorConfig};
use spaceedit::training::TrainConfig;

/// Smallest configuration the generator accepts, fast enough for unit-scale tests.
pub fn tiny_config() -> GeneratorConfig {
    GeneratorConfig {
        base_channels: 4,
        max_channels: 8,
        mapping_depth: 2,
        ..GeneratorConfig::toy(8)
    }
}

pub fn tiny_bundle() -> GeneratorBundle {
    GeneratorBundle::new(tiny_config()).unwrap()
}

pub fn tiny_pairs(n: usize) -> Vec<ImagePair> {
    synthesize_dataset(BaseSource::Procedural, n, 3, 8).unwrap()
}

pub fn tiny_train(total_images: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        total_images,
        checkpoint_interval: 0,
        seed: 5,
        ..TrainConfig::default()
    }
}

/// A couple of training steps, enough for operations that refuse untrained models.
pub fn trained_tiny() -> GeneratorBundle {
    let pairs = tiny_pairs(40);
    spaceedit::training::train(
        &pairs,
        &tiny_config(),
        &tiny_train(8),
        None,
        &Default::default(),
    )
    .unwrap()
}
