//! Deterministic fixtures shared by the kernel benchmarks.

use candle_core::{DType, Device, Tensor};
use colorizer_core::nn::randn;
use colorizer_core::{ImageRgb, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform random RGB image.
pub fn noise_image(height: usize, width: usize, seed: u64) -> ImageRgb {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = (0..height * width * 3).map(|_| rng.random()).collect();
    ImageRgb::new(height, width, px).expect("dimensions match pixel count")
}

/// Standard normal f32 tensor on the CPU.
pub fn normal(shape: &[usize], seed: u64) -> Result<Tensor> {
    randn(&mut ChaCha8Rng::seed_from_u64(seed), shape, DType::F32, &Device::Cpu)
}
