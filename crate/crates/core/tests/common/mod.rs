#![allow(dead_code)]

use clickseg::autograd::Mat;
use clickseg::decoder::DecoderConfig;
use clickseg::model::{Model, ModelConfig};
use clickseg::scene::{generate_synthetic_scene, GeneratorSpec, SceneSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A model small enough for many decoder passes per test.
pub fn small_config() -> ModelConfig {
    let mut config = ModelConfig::tiny();
    config.voxel_size = 0.1;
    config.backbone.widths = vec![8, 16];
    config.backbone.feat_dim = 12;
    config.decoder = DecoderConfig {
        dim: 12,
        heads: 2,
        ffn_dim: 24,
        layers: 2,
        ..DecoderConfig::default()
    };
    config.background_queries = 3;
    config
}

pub fn small_model(seed: u64) -> Model {
    Model::new(small_config(), seed).unwrap()
}

pub fn scene(seed: u64, objects: usize) -> SceneSample {
    let spec = GeneratorSpec {
        seed,
        object_count: objects,
        room_size: [1.5, 1.5],
        footprint_range: [0.2, 0.5],
        height_range: [0.2, 0.5],
        // Label-pure voxels at the 0.1 m test grid.
        min_gap: 0.1,
        ..Default::default()
    };
    generate_synthetic_scene(&spec).unwrap()
}
