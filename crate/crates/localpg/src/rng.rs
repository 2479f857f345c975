//! Deterministic RNG substreams.
//!
//! Sampling is reproducible under parallel execution because every trajectory
//! owns an independent counter-based generator derived from the master seed
//! and a label path such as `[iteration, trajectory]`. The derivation is a
//! splitmix64 chain feeding a ChaCha key, so distinct paths give statistically
//! independent streams and the same path always gives the same stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FOLD_INIT: u64 = 0x9d4f_3c65_a852_1e0b;

fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fold a label path into a single 64-bit stream id.
pub fn fold_seed(seed: u64, path: &[u64]) -> u64 {
    let mut state = splitmix64(FOLD_INIT ^ seed);
    for &label in path {
        state = splitmix64(state ^ splitmix64(label));
    }
    state
}

/// Derive the ChaCha substream for `(seed, path)`.
pub fn substream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut state = fold_seed(seed, path);
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Draw an index from an unnormalized nonnegative weight slice.
///
/// Consumes exactly one `f64` from the generator; the last positive-weight
/// index absorbs any floating-point shortfall in the cumulative sum.
pub fn sample_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    use rand::Rng;
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    let mut last = 0;
    for (idx, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        last = idx;
        u -= w;
        if u < 0.0 {
            return idx;
        }
    }
    last
}
