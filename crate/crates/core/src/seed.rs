//! Named random substreams derived from one top-level seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit FNV-1a over a label.
pub fn label_hash(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Seed for the substream `label` of `seed`.
pub fn substream_seed(seed: u64, label: &str) -> u64 {
    splitmix64(seed ^ splitmix64(label_hash(label)))
}

/// Seed for a sub-substream indexed by an integer (epoch, session, ...).
pub fn indexed_seed(seed: u64, label: &str, index: u64) -> u64 {
    splitmix64(substream_seed(seed, label) ^ splitmix64(index.wrapping_add(1)))
}

pub fn rng(seed: u64, label: &str) -> Rng {
    Rng::seed_from_u64(substream_seed(seed, label))
}

pub fn indexed_rng(seed: u64, label: &str, index: u64) -> Rng {
    Rng::seed_from_u64(indexed_seed(seed, label, index))
}
