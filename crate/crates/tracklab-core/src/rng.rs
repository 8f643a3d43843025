//! Named, stateless RNG streams.
//!
//! Every random draw in the pipeline comes from a stream addressed by
//! `(master seed, name, index)`. Streams are independent: changing the
//! draws taken from one stream never shifts another, and any stream can
//! be reconstructed mid-run (e.g. when resuming from a checkpoint) from
//! its address alone.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a, used only to fold stream names into seed material.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// RNG for stream `name` at position `index` under `master`.
///
/// The 32-byte ChaCha seed is the concatenation of the master seed, the
/// hashed name, the index, and a constant tag, all little-endian. This is
/// a pure function; calling it twice yields identical generators.
pub fn stream(master: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[0..8].copy_from_slice(&master.to_le_bytes());
    seed[8..16].copy_from_slice(&fnv1a(name.as_bytes()).to_le_bytes());
    seed[16..24].copy_from_slice(&index.to_le_bytes());
    seed[24..32].copy_from_slice(&0x7261_6c62_6b63_6154u64.to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}
