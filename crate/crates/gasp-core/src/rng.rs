//! Deterministic random number generation.
//!
//! All stochastic choices in the crate flow through ChaCha8 streams seeded
//! from explicit `u64` values, so any artifact (scene, dataset, model,
//! training run) can be reproduced bit-for-bit from its seed. Independent
//! concerns derive their own sub-seed from a parent seed and a domain
//! string, which keeps the streams decoupled: inserting a draw in one
//! domain never shifts another domain's sequence.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The RNG used everywhere in this crate.
pub type DetRng = ChaCha8Rng;

/// Creates the deterministic RNG for `seed`.
pub fn rng_from_seed(seed: u64) -> DetRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent sub-seed from a parent seed and a domain label.
///
/// The label is hashed with FNV-1a and mixed with the parent through a
/// SplitMix64 finalizer. Distinct labels give uncorrelated streams.
pub fn derive_seed(parent: u64, domain: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in domain.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(parent ^ h)
}

/// Derives an independent sub-seed from a parent seed and an index.
pub fn derive_seed_indexed(parent: u64, domain: &str, index: u64) -> u64 {
    splitmix64(derive_seed(parent, domain).wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
