//! Benchmark fixtures shared by the criterion benches.

use pccodec::bitstream::Model;
use pccodec::codec::{Codec, CodecConfig, ConfigName};
use pccodec::nn::Tensor;

/// A frozen, untrained model of the given configuration.
pub fn model(name: ConfigName, points: usize) -> Model {
    let codec = Codec::new(CodecConfig::new(name, points).expect("valid config"), 1).expect("codec");
    Model::freeze(codec, 1000.0)
}

/// Deterministic pseudo-random `3 × points` cloud in `[-1, 1]³`.
pub fn cloud(points: usize, seed: u32) -> Tensor<f32> {
    let mut state = seed.wrapping_mul(2_654_435_761).max(1);
    Tensor::from_fn(3, points, |_, _| {
        state ^= state << 13;
        state ^= state >> 17;
        state ^= state << 5;
        state as f32 / u32::MAX as f32 * 2.0 - 1.0
    })
}
