//! Counter-based random streams: every (seed, purpose, index) triple maps to an
//! independent generator, so results never depend on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for `index` under `(seed, key)`.
pub fn stream(seed: u64, key: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(key)));
    rng.set_stream(index);
    rng
}

// Stream purposes.
pub(crate) const KEY_NOISE: u64 = 0x6e6f697365;
pub(crate) const KEY_SHUFFLE: u64 = 0x73687566;
pub(crate) const KEY_JITTER: u64 = 0x6a6974;
pub(crate) const KEY_INIT: u64 = 0x696e6974;
pub(crate) const KEY_HOLDOUT: u64 = 0x686f6c64;
