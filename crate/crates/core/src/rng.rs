//! Named, reproducible random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from the run
//! seed plus a tag and a tuple of indices (round, client id, ...). Streams
//! never share state, so work can be fanned out across threads without
//! changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed, a tag and a list of indices into a 64-bit sub-seed.
pub fn derive_seed(seed: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut h = splitmix64(seed);
    for b in tag.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    h = splitmix64(h ^ 0xFF);
    for &i in indices {
        h = splitmix64(h ^ i);
    }
    h
}

/// Opens the stream identified by `(seed, tag, indices)`.
pub fn stream(seed: u64, tag: &str, indices: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, indices))
}

/// Draws a fresh sub-seed from an existing stream.
pub fn fork(rng: &mut Stream) -> Stream {
    use rand::RngCore;
    ChaCha8Rng::seed_from_u64(rng.next_u64())
}
