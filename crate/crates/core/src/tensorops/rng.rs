//! Named, seeded random streams.
//!
//! A stream is a ChaCha8 generator keyed by `(name, seed)`. Distinct names
//! give unrelated key material, so studies can vary one randomness axis
//! (initialization, latent draws, injection, data) while holding the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::array::DenseArray;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic generator for stream `name` under `seed`.
pub fn stream(name: &str, seed: u64) -> ChaCha8Rng {
    // FNV-1a over the name, then mixed with the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut key = [0u8; 32];
    let mut state = splitmix(h ^ splitmix(seed));
    for chunk in key.chunks_mut(8) {
        state = splitmix(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Standard-normal array drawn from stream `(name, seed)`.
pub fn seeded_normal(rows: usize, cols: usize, name: &str, seed: u64) -> DenseArray {
    let mut rng = stream(name, seed);
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    DenseArray::from_vec(rows, cols, data).expect("shape matches")
}
