//! Deterministic seed derivation.
//!
//! Every random decision in the pipeline draws from a ChaCha8 stream whose
//! seed is derived from the single run seed plus a few context words
//! (stage, epoch, patch id, ...). Derived streams are independent of
//! evaluation order, so the same run seed always reproduces the same bytes.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

// Context tags for derived streams. Arbitrary distinct constants.
pub const TAG_SYNTH: u64 = 0x53_59_4e_54;
pub const TAG_CROP: u64 = 0x43_52_4f_50;
pub const TAG_AUGMENT: u64 = 0x41_55_47;
pub const TAG_SPLIT: u64 = 0x53_50_4c_54;
pub const TAG_INIT: u64 = 0x49_4e_49_54;
pub const TAG_SHUFFLE: u64 = 0x53_48_55_46;
pub const TAG_EMBED: u64 = 0x45_4d_42;
pub const TAG_DESCRIPTOR: u64 = 0x44_45_53_43;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a root seed with context words into a new 64-bit seed.
pub fn derive(seed: u64, words: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ 0x243f_6a88_85a3_08d3);
    for &w in words {
        h = splitmix64(h ^ splitmix64(w));
    }
    h
}

/// ChaCha8 stream for a derived seed.
pub fn stream(seed: u64, words: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, words))
}

/// FNV-1a hash, for turning string ids into context words.
pub fn hash_str(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_is_stable_and_context_sensitive() {
        assert_eq!(derive(7, &[TAG_SYNTH]), derive(7, &[TAG_SYNTH]));
        assert_ne!(derive(7, &[TAG_SYNTH]), derive(8, &[TAG_SYNTH]));
        assert_ne!(derive(7, &[TAG_SYNTH]), derive(7, &[TAG_CROP]));
        assert_ne!(derive(7, &[TAG_SYNTH, 0]), derive(7, &[TAG_SYNTH, 1]));
    }

    #[test]
    fn hash_str_distinguishes_ids() {
        assert_eq!(hash_str("AU_s001_c03"), hash_str("AU_s001_c03"));
        assert_ne!(hash_str("AU_s001_c03"), hash_str("AU_s001_c04"));
        assert_ne!(hash_str(""), hash_str("a"));
    }

    #[test]
    fn streams_reproduce() {
        use rand::RngCore;
        let mut a = stream(42, &[TAG_INIT, 3]);
        let mut b = stream(42, &[TAG_INIT, 3]);
        assert_eq!(a.next_u64(), b.next_u64());
    }
}
