//! Shared fixtures for the benchmark targets.

use mmlab_core::config::{DecoderConfig, EncoderConfig, ModelConfig, PackingConfig};
use mmlab_core::model::SampleInput;
use mmlab_core::seed::{next_f64, SeedSplitter};
use mmlab_core::Tensor;

/// The desk-tiny model shape used throughout the benches.
pub fn bench_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            depth: 2,
            width: 32,
            mlp_width: 88,
            heads: 4,
            patch_stride: 16,
            shuffle_factor: 2,
            out_width: 64,
        },
        decoder: DecoderConfig { depth: 4, width: 64, mlp_width: 176, heads: 4, vocab: 32 },
        packing: PackingConfig::default(),
    }
}

pub fn bench_sample(seed: u64) -> SampleInput {
    let mut rng = SeedSplitter::new(seed).stream("bench");
    let image = Tensor::new(
        vec![64, 64, 3],
        (0..64 * 64 * 3).map(|_| next_f64(&mut rng)).collect(),
    )
    .unwrap();
    SampleInput { image: Some(image), caption: vec![2, 3, 4, 5, 1] }
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = SeedSplitter::new(seed).stream("mat");
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| next_f64(&mut rng) - 0.5).collect(),
    )
    .unwrap()
}
