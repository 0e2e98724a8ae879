//! Named random sub-streams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Real, Tensor};

/// Purposes that draw randomness. Each gets its own ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Prior = 2,
    Langevin = 3,
    Shuffle = 4,
    LatentInit = 5,
    Sprites = 6,
    Metrics = 7,
    Reconstruct = 8,
}

/// A generator for `stream` under `seed`, positioned at the start.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    stream_rng_at(seed, stream as u64, 0)
}

/// A generator for an arbitrary stream id at a given word position.
pub fn stream_rng_at(seed: u64, stream: u64, word_pos: u128) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    rng
}

/// Sub-stream of `stream` dedicated to one training iteration (or epoch).
/// Randomness consumed at step `t` then depends only on `(seed, t)`.
pub fn iteration_rng(seed: u64, stream: Stream, t: u64) -> ChaCha8Rng {
    stream_rng_at(seed, ((stream as u64) << 32) | (t & 0xffff_ffff), 0)
}

/// Sub-stream for one epoch of shuffling, so batch order is stateless.
pub fn shuffle_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    iteration_rng(seed, Stream::Shuffle, epoch)
}

/// `n` rows of standard normal draws as a `[n, d]` tensor.
pub fn normal_matrix<T: Real>(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn(&[n, d], |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z)
    })
}
