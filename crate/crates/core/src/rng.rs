//! Seed derivation and counter-based random streams.
//!
//! Every random quantity in the crate is drawn from a ChaCha stream selected
//! by `(seed, key)`, so a value depends only on where it sits in the
//! experiment, not on how many draws happened elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Namespace for training-stream instance seeds.
pub const NS_TRAIN: u64 = 0x7472_6169_6e00_0001;
/// Namespace for held-out evaluation instance seeds.
pub const NS_EVAL: u64 = 0x6576_616c_0000_0002;
/// Namespace for action sampling during training.
pub const NS_SAMPLING: u64 = 0x7361_6d70_0000_0003;
/// Namespace for baseline draws (random crops).
pub const NS_BASELINE: u64 = 0x6261_7365_0000_0004;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a namespace and an index into a fresh 64-bit seed.
pub fn derive_seed(seed: u64, namespace: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(namespace)).wrapping_add(index))
}

/// A ChaCha8 stream keyed by `(seed, key)`.
pub fn stream(seed: u64, key: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(key);
    rng
}
