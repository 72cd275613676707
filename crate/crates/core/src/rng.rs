//! Deterministic seed derivation.
//!
//! Every stochastic choice in the crate flows from an explicit u64 seed
//! through `derive`, so corpora, initializations and training runs are
//! reproducible across processes and platforms.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 step; good avalanche behaviour for cheap seed chains.
fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a master seed and a tag path.
pub fn derive(master: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(master);
    for &t in tags {
        s = splitmix64(s ^ t.wrapping_mul(0xA24B_AED4_963E_E407));
    }
    s
}

/// Stable u64 tag for a string label.
pub fn tag(label: &str) -> u64 {
    let mut s = 0xcbf2_9ce4_8422_2325u64; // FNV-1a
    for b in label.bytes() {
        s ^= b as u64;
        s = s.wrapping_mul(0x0000_0100_0000_01B3);
    }
    s
}

/// ChaCha stream seeded from a derived value.
pub fn rng_from(master: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, tags))
}

/// ChaCha stream for a labeled purpose.
pub fn rng_labeled(master: u64, label: &str, indices: &[u64]) -> ChaCha8Rng {
    let mut tags = vec![tag(label)];
    tags.extend_from_slice(indices);
    rng_from(master, &tags)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_stable_and_distinct() {
        assert_eq!(derive(1, &[2, 3]), derive(1, &[2, 3]));
        assert_ne!(derive(1, &[2, 3]), derive(1, &[3, 2]));
        assert_ne!(derive(1, &[2]), derive(2, &[2]));
        assert_ne!(tag("dropout"), tag("shuffle"));
    }
}
