//! Stable (platform- and release-independent) hashing for feature keys and
//! hashed embeddings.

use std::hash::Hasher;

use fnv::FnvHasher;

pub use fnv::FnvHashMap;

/// 64-bit FNV-1a of the UTF-8 bytes.
pub fn hash_str(s: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write(s.as_bytes());
    h.finish()
}

/// splitmix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive combination of two hashes.
pub fn combine(a: u64, b: u64) -> u64 {
    mix(a ^ mix(b).rotate_left(23))
}
