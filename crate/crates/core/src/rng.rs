//! Seeded random-stream derivation.
//!
//! Every consumer of randomness gets its own ChaCha8 stream derived from the
//! master seed, a purpose tag, and an index. Streams are independent of event
//! processing order, so refactoring the simulator cannot silently change the
//! data, the partitions, or any device's draw sequence.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic stream of pseudo-random numbers.
pub type Stream = ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive an independent stream from `(master, tag, index)`.
pub fn stream(master: u64, tag: &str, index: u64) -> Stream {
    let mut seed = [0u8; 32];
    let a = master;
    let b = fnv1a(tag.as_bytes());
    let c = index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    // SplitMix-style mixing of the three words into the 256-bit seed.
    let mut state = a ^ b.rotate_left(17) ^ c.rotate_left(41);
    for chunk in seed.chunks_mut(8) {
        state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
        chunk.copy_from_slice(&z.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
