//! Deterministic named RNG streams. Every random draw in the pipeline comes
//! from a stream derived from (global seed, domain label, salt), so runs are
//! reproducible across platforms and independent of batch composition.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xCBF2_9CE4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01B3);
    }
    h
}

/// Derives a 64-bit stream key without constructing the RNG.
pub fn stream_key(seed: u64, domain: &str, salt: u64) -> u64 {
    let mut x = splitmix64(seed ^ fnv1a(domain.as_bytes()));
    x = splitmix64(x ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    x
}

/// New deterministic stream for (seed, domain, salt).
pub fn stream(seed: u64, domain: &str, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_key(seed, domain, salt))
}
