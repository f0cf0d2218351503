//! Seeded RNG streams.
//!
//! Every randomized stage derives its own ChaCha stream from the master seed,
//! a purpose tag, and a salt (document index, epoch, ...). Streams are
//! independent of iteration order, which keeps per-document work
//! parallel-safe and byte-reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(tag: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic sub-stream for (`master`, `tag`, `salt`).
pub fn derive(master: u64, tag: &str, salt: u64) -> ChaCha8Rng {
    let seed = splitmix(master ^ fnv1a(tag) ^ splitmix(salt));
    ChaCha8Rng::seed_from_u64(seed)
}
