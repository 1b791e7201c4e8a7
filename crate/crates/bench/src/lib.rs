//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uapforge::corpus::Waveform;
use uapforge::numerics::Tensor;

/// Uniform `[-1, 1)` tensor.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Noise utterances of `len` samples, labels cycling over `speakers`.
pub fn noise_utterances(count: usize, len: usize, speakers: usize, seed: u64) -> Vec<Waveform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let x = (0..len).map(|_| rng.random_range(-0.3..0.3)).collect();
            Waveform::new(x, i % speakers, format!("u{i}")).unwrap()
        })
        .collect()
}
