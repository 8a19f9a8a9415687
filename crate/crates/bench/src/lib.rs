//! Shared fixtures for the benchmarks in `benches/`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twins_core::{Model, ModelConfig, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform `[0, 1)` values of the given shape.
pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f32>()).collect()).expect("consistent shape")
}

/// A fine-tuning-ready model on `[3, size, size]` images with 10 classes,
/// plus a batch of inputs and labels.
pub fn model_and_batch(batch: usize, size: usize) -> (Model<f32>, Tensor<f32>, Vec<usize>) {
    let mut r = rng(7);
    let mut cfg = ModelConfig::new([3, size, size], 10);
    cfg.widths = vec![16, 32];
    let model = Model::new(cfg, &mut r).expect("valid config");
    let x = uniform(&[batch, 3, size, size], &mut r);
    let y = (0..batch).map(|i| i % 10).collect();
    (model, x, y)
}
