//! Seed derivation for reproducible parallel sampling.
//!
//! Every parallel sampler in this crate splits its work into fixed-size
//! batches. Batch `i` draws from `ChaCha8Rng` seeded with the master seed on
//! stream `i`, and partial results are merged in batch order, so the output
//! depends on the seed only and never on the number of worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Episodes per batch for all batched samplers.
pub const BATCH_SIZE: usize = 2048;

/// SplitMix64 finalizer, used to derive independent child seeds.
pub fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn batch_rng(seed: u64, batch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(batch as u64);
    rng
}

/// Sizes of the batches covering `total` items.
pub fn batches(total: usize) -> impl Iterator<Item = (usize, usize)> {
    let n = total.div_ceil(BATCH_SIZE);
    (0..n).map(move |b| (b, BATCH_SIZE.min(total - b * BATCH_SIZE)))
}
